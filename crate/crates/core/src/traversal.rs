//! Latent-traversal grids: decode one sample while sweeping each traversable
//! block from −3 to +3, tile the reconstructions into a single grayscale
//! image, and write it as binary PGM.

use std::io::Write as _;
use std::path::Path;

use crate::checkpoint::Checkpoint;
use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::model::{assemble, traverse_block, BhivaeParams, EncodeMode};
use crate::ndgrad::Array;

pub const TRAVERSAL_LO: f64 = -3.0;
pub const TRAVERSAL_HI: f64 = 3.0;

/// A rendered traversal grid: one tile row per traversable block, one tile
/// column per sweep step.
#[derive(Clone, Debug, PartialEq)]
pub struct PgmImage {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<u8>,
}

fn to_byte(v: f64) -> u8 {
    (v.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Sweep every block of the sample's latent code and tile the decodes.
pub fn traversal_grid(params: &BhivaeParams, x: &Array, steps: usize) -> Result<PgmImage> {
    if steps < 2 {
        return Err(Error::Validation(format!(
            "traversal needs at least 2 steps, got {steps}"
        )));
    }
    let data_dim = params.arch.data_dim;
    if x.rank() != 2 || x.shape() != [1, data_dim] {
        return Err(Error::Validation(format!(
            "traversal sample must be [1, {}], got {:?}",
            data_dim,
            x.shape()
        )));
    }
    let res = (data_dim as f64).sqrt().round() as usize;
    if res * res != data_dim {
        return Err(Error::Validation(format!(
            "data dim {data_dim} is not a square image"
        )));
    }
    let layout = &params.arch.layout;
    let blocks = layout.traversal_blocks();
    let code = params.encode(x, EncodeMode::Deterministic, 0)?;
    let z = assemble(&code);

    let width = steps * res;
    let height = blocks * res;
    let mut pixels = vec![0u8; width * height];
    for b in 0..blocks {
        for j in 0..steps {
            let t = TRAVERSAL_LO
                + (TRAVERSAL_HI - TRAVERSAL_LO) * j as f64 / (steps - 1) as f64;
            let edited = traverse_block(&z, layout, b, t)?;
            let image = params.decode(&edited)?;
            for r in 0..res {
                for c in 0..res {
                    pixels[(b * res + r) * width + j * res + c] =
                        to_byte(image.data()[r * res + c]);
                }
            }
        }
    }
    Ok(PgmImage {
        width,
        height,
        pixels,
    })
}

/// Serialize as binary PGM (P5, maxval 255).
pub fn pgm_bytes(image: &PgmImage) -> Vec<u8> {
    let mut out = format!("P5\n{} {}\n255\n", image.width, image.height).into_bytes();
    out.extend_from_slice(&image.pixels);
    out
}

pub fn write_pgm(image: &PgmImage, path: &Path) -> Result<()> {
    let mut file = std::fs::File::create(path)?;
    file.write_all(&pgm_bytes(image))?;
    Ok(())
}

/// Render the grid for one dataset sample and write it to `out_path`.
pub fn emit_traversal(
    ckpt: &Checkpoint,
    dataset: &Dataset,
    sample_index: usize,
    steps: usize,
    out_path: &Path,
) -> Result<PgmImage> {
    if sample_index >= dataset.len() {
        return Err(Error::Validation(format!(
            "sample index {} out of range ({} samples)",
            sample_index,
            dataset.len()
        )));
    }
    let x = dataset.gather_images(&[sample_index])?;
    let image = traversal_grid(&ckpt.params, &x, steps)?;
    write_pgm(&image, out_path)?;
    Ok(image)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{BhivaeArch, BlockLayout, Mode};

    fn toy_params() -> BhivaeParams {
        let arch = BhivaeArch {
            layout: BlockLayout::new(vec![2, 2, 2], vec![6, 6], 8).unwrap(),
            data_dim: 16 * 16,
            mode: Mode::Unsupervised,
            enc_hidden: vec![vec![12], vec![12], vec![12]],
            merge_dim: 8,
            dec_hidden: vec![12],
            class_counts: vec![],
            disc_hidden: vec![8],
        };
        arch.validate().unwrap();
        BhivaeParams::init(&arch, 7).unwrap()
    }

    fn toy_sample(dim: usize) -> Array {
        let vals: Vec<f64> = (0..dim).map(|i| ((i % 5) as f64) / 4.0).collect();
        Array::new(vec![1, dim], vals).unwrap()
    }

    #[test]
    fn grid_has_one_row_per_block_and_one_column_per_step() {
        let params = toy_params();
        let x = toy_sample(256);
        let grid = traversal_grid(&params, &x, 8).unwrap();
        // 3 feature blocks plus four 2-wide residual sub-blocks.
        assert_eq!(grid.height, 7 * 16);
        assert_eq!(grid.width, 8 * 16);
        assert_eq!(grid.pixels.len(), grid.width * grid.height);
    }

    #[test]
    fn two_step_sweep_hits_both_endpoints() {
        let params = toy_params();
        let x = toy_sample(256);
        let grid = traversal_grid(&params, &x, 2).unwrap();

        let code = params
            .encode(&x, crate::model::EncodeMode::Deterministic, 0)
            .unwrap();
        let z = assemble(&code);
        let layout = &params.arch.layout;
        let res = 16;
        for b in 0..layout.traversal_blocks() {
            for (col, t) in [(0usize, -3.0), (1usize, 3.0)] {
                let want = params
                    .decode(&traverse_block(&z, layout, b, t).unwrap())
                    .unwrap();
                for r in 0..res {
                    for c in 0..res {
                        assert_eq!(
                            grid.pixels[(b * res + r) * grid.width + col * res + c],
                            to_byte(want.data()[r * res + c]),
                            "block {b} col {col} pixel ({r},{c})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn pgm_header_is_exact() {
        let image = PgmImage {
            width: 3,
            height: 2,
            pixels: vec![0, 64, 128, 192, 255, 10],
        };
        let bytes = pgm_bytes(&image);
        assert!(bytes.starts_with(b"P5\n3 2\n255\n"));
        assert_eq!(bytes.len(), b"P5\n3 2\n255\n".len() + 6);
        assert_eq!(&bytes[bytes.len() - 6..], &[0, 64, 128, 192, 255, 10]);
    }

    #[test]
    fn emission_is_deterministic_and_range_checked() {
        let params = toy_params();
        let x = toy_sample(256);
        let a = traversal_grid(&params, &x, 5).unwrap();
        let b = traversal_grid(&params, &x, 5).unwrap();
        assert_eq!(a, b);

        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("grid.pgm");
        write_pgm(&a, &path).unwrap();
        let first = std::fs::read(&path).unwrap();
        write_pgm(&b, &path).unwrap();
        assert_eq!(first, std::fs::read(&path).unwrap());
        assert_eq!(first, pgm_bytes(&a));

        assert!(traversal_grid(&params, &x, 1).is_err());
    }
}
