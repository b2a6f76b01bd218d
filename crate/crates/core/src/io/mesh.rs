//! Per-patch quad meshes as OBJ with a companion material file.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::patchmodel::{regular_grid, Atlas};

/// Patch colours, cycled when there are more than 25 patches.
pub const PALETTE: [[f64; 3]; 25] = [
    [0.902, 0.098, 0.294],
    [0.235, 0.706, 0.294],
    [1.000, 0.882, 0.098],
    [0.000, 0.510, 0.784],
    [0.961, 0.510, 0.188],
    [0.569, 0.118, 0.706],
    [0.275, 0.941, 0.941],
    [0.941, 0.196, 0.902],
    [0.824, 0.961, 0.235],
    [0.980, 0.745, 0.831],
    [0.000, 0.502, 0.502],
    [0.863, 0.745, 1.000],
    [0.667, 0.431, 0.157],
    [1.000, 0.980, 0.784],
    [0.502, 0.000, 0.000],
    [0.667, 1.000, 0.765],
    [0.502, 0.502, 0.000],
    [1.000, 0.843, 0.706],
    [0.000, 0.000, 0.502],
    [0.502, 0.502, 0.502],
    [0.400, 0.200, 0.600],
    [0.200, 0.400, 0.200],
    [0.800, 0.400, 0.400],
    [0.400, 0.600, 0.800],
    [0.100, 0.100, 0.100],
];

/// Vertices and 1-based quads of one exported patch.
#[derive(Debug, Clone, PartialEq)]
pub struct PatchMesh {
    pub vertices: Vec<[f64; 3]>,
    pub quads: Vec<[usize; 4]>,
}

/// Decodes a `resolution x resolution` grid on every patch and connects
/// neighbouring grid points into quads (vertex indices local to the patch,
/// zero-based).
pub fn patch_meshes(atlas: &Atlas, resolution: usize) -> Result<Vec<PatchMesh>> {
    if resolution < 2 {
        return Err(Error::Config(format!("grid resolution must be >= 2, got {resolution}")));
    }
    let grid = regular_grid(resolution);
    let mut quads = Vec::with_capacity((resolution - 1) * (resolution - 1));
    for j in 0..resolution - 1 {
        for i in 0..resolution - 1 {
            let a = j * resolution + i;
            quads.push([a, a + 1, a + 1 + resolution, a + resolution]);
        }
    }
    (0..atlas.patch_count())
        .map(|k| {
            let eval = atlas.decoder(k)?.eval_batch(&grid);
            let vertices = eval.positions.rows().into_iter().map(|r| [r[0], r[1], r[2]]).collect();
            Ok(PatchMesh {
                vertices,
                quads: quads.clone(),
            })
        })
        .collect()
}

/// Writes `path` (OBJ) and a material file next to it with the same stem.
pub fn export_mesh(atlas: &Atlas, resolution: usize, path: &Path) -> Result<()> {
    let meshes = patch_meshes(atlas, resolution)?;
    let mtl_path = path.with_extension("mtl");
    let mtl_name = mtl_path
        .file_name()
        .and_then(|s| s.to_str())
        .unwrap_or("patches.mtl")
        .to_string();
    let mut obj = String::new();
    let mut mtl = String::new();
    writeln!(obj, "# {} {}", env!("CARGO_PKG_NAME"), env!("CARGO_PKG_VERSION")).unwrap();
    writeln!(obj, "mtllib {mtl_name}").unwrap();
    let mut base = 1;
    for (k, mesh) in meshes.iter().enumerate() {
        let c = PALETTE[k % PALETTE.len()];
        writeln!(mtl, "newmtl patch_{k}\nKd {} {} {}\n", c[0], c[1], c[2]).unwrap();
        writeln!(obj, "o patch_{k}\nusemtl patch_{k}").unwrap();
        for v in &mesh.vertices {
            writeln!(obj, "v {:e} {:e} {:e}", v[0], v[1], v[2]).unwrap();
        }
        for q in &mesh.quads {
            writeln!(obj, "f {} {} {} {}", q[0] + base, q[1] + base, q[2] + base, q[3] + base).unwrap();
        }
        base += mesh.vertices.len();
    }
    fs::write(path, obj)?;
    fs::write(mtl_path, mtl)?;
    Ok(())
}
