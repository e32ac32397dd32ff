//! Model checkpoint: a single little-endian file holding a magic tag,
//! version, layer shape table, the sigma schedule, flat f32 weight blocks
//! and the query cloud, plus an optional JSON sidecar next to it.

use crate::model::{ModelWeights, DESCRIPTOR_WIDTH, D_HIDDEN, F_HIDDEN};
use crate::nn::Linear;
use crate::triplane::{EncoderWeights, MLP_HIDDEN};
use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::Vector3;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

const MAGIC: &[u8; 4] = b"CGDF";
const VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    Format(String),
}

/// Path of the JSON sidecar written next to a checkpoint.
pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut os = path.as_os_str().to_owned();
    os.push(".json");
    PathBuf::from(os)
}

pub fn save_checkpoint(
    path: &Path,
    model: &ModelWeights,
    sidecar: Option<&serde_json::Value>,
) -> Result<(), CheckpointError> {
    let file = std::fs::File::create(path)?;
    let mut w = BufWriter::new(file);
    w.write_all(MAGIC)?;
    w.write_u32::<LittleEndian>(VERSION)?;
    w.write_u32::<LittleEndian>(model.resolution as u32)?;
    w.write_u32::<LittleEndian>(model.feat_dim as u32)?;
    w.write_u32::<LittleEndian>(model.n_query() as u32)?;

    // Shape table in tensor visitation order.
    let mut shapes: Vec<Vec<u32>> = Vec::new();
    collect_shapes(model, &mut shapes);
    w.write_u32::<LittleEndian>(shapes.len() as u32)?;
    for s in &shapes {
        w.write_u32::<LittleEndian>(s.len() as u32)?;
        for &d in s {
            w.write_u32::<LittleEndian>(d)?;
        }
    }

    w.write_u32::<LittleEndian>(model.train_sigmas.len() as u32)?;
    for &s in &model.train_sigmas {
        w.write_f64::<LittleEndian>(s)?;
    }

    let mut err = None;
    model.visit_tensors(&mut |t| {
        if err.is_some() {
            return;
        }
        for &x in t {
            if let Err(e) = w.write_f32::<LittleEndian>(x as f32) {
                err = Some(e);
                return;
            }
        }
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    for q in &model.query_cloud {
        for i in 0..3 {
            w.write_f32::<LittleEndian>(q[i] as f32)?;
        }
    }
    w.flush()?;

    if let Some(value) = sidecar {
        std::fs::write(
            sidecar_path(path),
            serde_json::to_string_pretty(value).expect("sidecar serializes"),
        )?;
    }
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<ModelWeights, CheckpointError> {
    let file = std::fs::File::open(path)?;
    let mut r = BufReader::new(file);
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(CheckpointError::Format(format!(
            "bad magic {magic:?}, expected {MAGIC:?}"
        )));
    }
    let version = r.read_u32::<LittleEndian>()?;
    if version != VERSION {
        return Err(CheckpointError::Format(format!(
            "unsupported version {version}"
        )));
    }
    let resolution = r.read_u32::<LittleEndian>()? as usize;
    let feat_dim = r.read_u32::<LittleEndian>()? as usize;
    let n_query = r.read_u32::<LittleEndian>()? as usize;

    let n_shapes = r.read_u32::<LittleEndian>()? as usize;
    let mut shapes = Vec::with_capacity(n_shapes);
    for _ in 0..n_shapes {
        let ndim = r.read_u32::<LittleEndian>()? as usize;
        let mut dims = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            dims.push(r.read_u32::<LittleEndian>()?);
        }
        shapes.push(dims);
    }

    let n_sigmas = r.read_u32::<LittleEndian>()? as usize;
    let mut sigmas = Vec::with_capacity(n_sigmas);
    for _ in 0..n_sigmas {
        sigmas.push(r.read_f64::<LittleEndian>()?);
    }

    let mut model = empty_model(resolution, feat_dim, n_query, sigmas);
    let mut expected: Vec<Vec<u32>> = Vec::new();
    collect_shapes(&model, &mut expected);
    if shapes != expected {
        return Err(CheckpointError::Format(format!(
            "layer shape table mismatch: file has {shapes:?}"
        )));
    }

    let mut err: Option<std::io::Error> = None;
    model.visit_tensors_mut(&mut |t| {
        if err.is_some() {
            return;
        }
        for x in t {
            match r.read_f32::<LittleEndian>() {
                Ok(v) => *x = v as f64,
                Err(e) => {
                    err = Some(e);
                    return;
                }
            }
        }
    });
    if let Some(e) = err {
        return Err(e.into());
    }
    for q in &mut model.query_cloud {
        for i in 0..3 {
            q[i] = r.read_f32::<LittleEndian>()? as f64;
        }
    }
    Ok(model)
}

fn collect_shapes(model: &ModelWeights, shapes: &mut Vec<Vec<u32>>) {
    let push2 = |shapes: &mut Vec<Vec<u32>>, l: &Linear| {
        shapes.push(vec![l.w.nrows() as u32, l.w.ncols() as u32]);
        shapes.push(vec![l.b.len() as u32]);
    };
    for l in &model.enc.mlp {
        push2(shapes, l);
    }
    for c in &model.enc.conv {
        shapes.push(vec![c.w.nrows() as u32, c.w.ncols() as u32]);
        shapes.push(vec![c.b.len() as u32]);
    }
    for l in &model.f_net {
        push2(shapes, l);
    }
    for l in &model.d_net {
        push2(shapes, l);
    }
}

fn empty_model(resolution: usize, feat_dim: usize, n_query: usize, sigmas: Vec<f64>) -> ModelWeights {
    let f_in = feat_dim + 3 + crate::model::TIME_EMBED_DIM;
    ModelWeights {
        enc: EncoderWeights {
            mlp: [
                Linear::zeros(MLP_HIDDEN, 3),
                Linear::zeros(MLP_HIDDEN, MLP_HIDDEN),
                Linear::zeros(feat_dim, MLP_HIDDEN),
            ],
            conv: [
                crate::nn::Conv3x3::zeros(feat_dim, feat_dim),
                crate::nn::Conv3x3::zeros(feat_dim, feat_dim),
                crate::nn::Conv3x3::zeros(feat_dim, feat_dim),
            ],
            feat_dim,
        },
        f_net: [
            Linear::zeros(F_HIDDEN, f_in),
            Linear::zeros(F_HIDDEN, F_HIDDEN),
            Linear::zeros(DESCRIPTOR_WIDTH, F_HIDDEN),
        ],
        d_net: [
            Linear::zeros(D_HIDDEN, n_query * DESCRIPTOR_WIDTH),
            Linear::zeros(1, D_HIDDEN),
        ],
        query_cloud: vec![Vector3::zeros(); n_query],
        resolution,
        feat_dim,
        train_sigmas: sigmas,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{normalize_cloud, sample_surface};
    use crate::model::ModelConfig;
    use crate::se3::{random_pose, PoseBounds};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha12Rng;
    use tempfile::tempdir;

    #[test]
    fn round_trip_is_bit_identical_on_energy_probes() {
        let mut rng = ChaCha12Rng::seed_from_u64(31);
        let cfg = ModelConfig {
            resolution: 16,
            feat_dim: 8,
        };
        let query: Vec<Vector3<f64>> = (0..5)
            .map(|_| Vector3::new(rng.gen_range(-0.05..0.05), 0.0, rng.gen_range(0.0..0.06)))
            .collect();
        let mut model = ModelWeights::init(&cfg, query, vec![1.0, 0.5, 0.1], &mut rng);
        for x in model.d_net[1].w.iter_mut() {
            *x = rng.gen_range(-0.2..0.2);
        }
        model.quantize_to_f32();

        let mesh = crate::dataset::unit_box_mesh().transformed(|v| v * 0.2);
        let cloud = sample_surface(&mesh, 200, &mut rng);
        let (normed, transform) = normalize_cloud(&cloud).unwrap();

        let dir = tempdir().unwrap();
        let path = dir.path().join("model.ckpt");
        save_checkpoint(&path, &model, Some(&serde_json::json!({"note": "test"}))).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(model, loaded);
        assert!(sidecar_path(&path).exists());

        let ctx_a = model.build_context(&normed, transform).unwrap();
        let ctx_b = loaded.build_context(&normed, transform).unwrap();
        let bounds = PoseBounds::new(Vector3::zeros(), Vector3::repeat(0.4));
        for _ in 0..100 {
            let pose = random_pose(&bounds, &mut rng);
            let ea = model.energy(&ctx_a, &pose, 0.1);
            let eb = loaded.energy(&ctx_b, &pose, 0.1);
            assert_eq!(ea.to_bits(), eb.to_bits());
        }
    }

    #[test]
    fn rejects_wrong_magic() {
        let dir = tempdir().unwrap();
        let path = dir.path().join("junk.ckpt");
        std::fs::write(&path, b"NOPExxxxxxxxxxxxxxx").unwrap();
        assert!(matches!(
            load_checkpoint(&path),
            Err(CheckpointError::Format(_))
        ));
    }
}
