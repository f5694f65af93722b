//! Checkpoint format and storage accounting.
//!
//! Layout (all integers and floats little-endian):
//!
//! ```text
//! "EXSS"                      4 bytes magic
//! version                     u16
//! layer count L               u16
//! L × (rows u32, cols u32)    weight shapes (rows = fan_out)
//! task count T                u16
//! density                     f32
//! weights                     every layer, f32 row-major
//! T × (task mask, free mask)  each mask = every layer, bit-packed
//!                             MSB-first row-major, padded to a byte per layer
//! ```
//!
//! The format stores neither activations nor task heads: hidden layers are
//! restored as relu and the output layer as identity, and tasks are numbered
//! `0..T` in the order they were saved.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use ndarray::Array2;

use crate::error::{ensure, Error, Result};
use crate::mask::{keep_count, LayerMask, MaskRegistry, Supermask};
use crate::network::{mlp_specs, ModelState};

pub const MAGIC: &[u8; 4] = b"EXSS";
pub const VERSION: u16 = 1;

/// Header fields that are not part of the model or the registry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckpointMeta {
    pub version: u16,
    pub density: f32,
}

fn mask_bytes(rows: usize, cols: usize) -> usize {
    (rows * cols).div_ceil(8)
}

/// Exact file size for the given weight shapes and task count.
pub fn checkpoint_bytes(shapes: &[(usize, usize)], tasks: usize) -> u64 {
    let header = 4 + 2 + 2 + 8 * shapes.len() + 2 + 4;
    let weights: usize = shapes.iter().map(|&(r, c)| 4 * r * c).sum();
    let masks: usize = shapes.iter().map(|&(r, c)| mask_bytes(r, c)).sum();
    (header + weights + tasks * 2 * masks) as u64
}

/// Weight bits plus mask bits under the theoretical accounting
/// `max(k·|W|·t, |W|)·32 + |W|`, with `k·|W|` taken as the whole number of
/// weights a task's mask keeps.
pub fn storage_bits(param_count: u64, density: f64, tasks: u64) -> Result<u64> {
    ensure!(param_count >= 1, Domain, "parameter count must be at least 1");
    ensure!(density > 0.0 && density <= 1.0, Domain, "density must lie in (0, 1], got {density}");
    let per_task = (density * param_count as f64).round() as u64;
    Ok(per_task.saturating_mul(tasks).max(param_count) * 32 + param_count)
}

/// Same accounting with the kept count summed per layer, as masks are drawn.
pub fn storage_bits_for_shapes(shapes: &[(usize, usize)], density: f64, tasks: u64) -> Result<u64> {
    let params: u64 = shapes.iter().map(|&(r, c)| (r * c) as u64).sum();
    ensure!(params >= 1, Domain, "parameter count must be at least 1");
    ensure!(density > 0.0 && density <= 1.0, Domain, "density must lie in (0, 1], got {density}");
    let per_task: u64 = shapes.iter().map(|&(r, c)| keep_count(r * c, density) as u64).sum();
    Ok(per_task.saturating_mul(tasks).max(params) * 32 + params)
}

fn u16_field(value: usize, what: &str) -> Result<u16> {
    u16::try_from(value).map_err(|_| Error::Format(format!("{what} {value} does not fit the header")))
}

fn u32_field(value: usize, what: &str) -> Result<u32> {
    u32::try_from(value).map_err(|_| Error::Format(format!("{what} {value} does not fit the header")))
}

fn write_mask(out: &mut impl Write, mask: &Supermask) -> Result<()> {
    for layer in &mask.layers {
        out.write_all(layer.as_bytes())?;
    }
    Ok(())
}

/// Encodes a checkpoint into memory.
pub fn encode_checkpoint(model: &ModelState, registry: &MaskRegistry, density: f32) -> Result<Vec<u8>> {
    let shapes = model.shapes();
    let mut out = Vec::with_capacity(checkpoint_bytes(&shapes, registry.task_count()) as usize);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&u16_field(shapes.len(), "layer count")?.to_le_bytes());
    for &(r, c) in &shapes {
        out.extend_from_slice(&u32_field(r, "rows")?.to_le_bytes());
        out.extend_from_slice(&u32_field(c, "cols")?.to_le_bytes());
    }
    out.extend_from_slice(&u16_field(registry.task_count(), "task count")?.to_le_bytes());
    out.extend_from_slice(&density.to_le_bytes());
    for w in model.weights() {
        for x in w.iter() {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    for id in registry.task_ids() {
        let task_mask = registry.task_mask(id)?;
        ensure!(task_mask.shapes() == shapes, Shape, "task {id} mask does not match the model");
        write_mask(&mut out, task_mask)?;
        write_mask(&mut out, registry.free_mask(id)?)?;
    }
    Ok(out)
}

/// Writes a checkpoint and returns the number of bytes written.
pub fn save_checkpoint(path: impl AsRef<Path>, model: &ModelState, registry: &MaskRegistry, density: f32) -> Result<u64> {
    let bytes = encode_checkpoint(model, registry, density)?;
    let mut f = BufWriter::new(File::create(path)?);
    f.write_all(&bytes)?;
    f.flush()?;
    Ok(bytes.len() as u64)
}

fn read_array<const N: usize>(r: &mut impl Read) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b)?;
    Ok(b)
}

fn read_mask(r: &mut impl Read, shapes: &[(usize, usize)]) -> Result<Supermask> {
    let layers = shapes
        .iter()
        .map(|&(rows, cols)| {
            let mut bits = vec![0u8; mask_bytes(rows, cols)];
            r.read_exact(&mut bits)?;
            LayerMask::from_bytes(rows, cols, bits).map_err(|e| Error::Format(format!("mask padding: {e}")))
        })
        .collect::<Result<_>>()?;
    Ok(Supermask { layers })
}

/// Decodes a checkpoint from any reader. Truncation surfaces as an
/// `UnexpectedEof` I/O error; trailing bytes are a format error.
pub fn decode_checkpoint(mut r: impl Read) -> Result<(ModelState, MaskRegistry, CheckpointMeta)> {
    let magic: [u8; 4] = read_array(&mut r)?;
    ensure!(&magic == MAGIC, Format, "bad magic {magic:?}");
    let version = u16::from_le_bytes(read_array(&mut r)?);
    ensure!(version == VERSION, Format, "unsupported version {version}");
    let layers = u16::from_le_bytes(read_array(&mut r)?) as usize;
    ensure!(layers >= 1, Format, "checkpoint has no layers");
    let mut shapes = Vec::with_capacity(layers);
    for _ in 0..layers {
        let rows = u32::from_le_bytes(read_array(&mut r)?) as usize;
        let cols = u32::from_le_bytes(read_array(&mut r)?) as usize;
        shapes.push((rows, cols));
    }
    let tasks = u16::from_le_bytes(read_array(&mut r)?) as usize;
    let density = f32::from_le_bytes(read_array(&mut r)?);

    let mut widths = vec![shapes[0].1];
    for (i, &(rows, cols)) in shapes.iter().enumerate() {
        ensure!(cols == widths[i], Format, "layer {i} expects {cols} inputs but receives {}", widths[i]);
        widths.push(rows);
    }
    let mut weights = Vec::with_capacity(layers);
    for &(rows, cols) in &shapes {
        let mut raw = vec![0u8; 4 * rows * cols];
        r.read_exact(&mut raw)?;
        let vals = raw.chunks_exact(4).map(|b| f32::from_le_bytes([b[0], b[1], b[2], b[3]])).collect();
        weights.push(Array2::from_shape_vec((rows, cols), vals).expect("length matches shape"));
    }
    let model = ModelState::new(mlp_specs(&widths), weights).map_err(|e| Error::Format(e.to_string()))?;

    let mut registry = MaskRegistry::new();
    for t in 0..tasks {
        let task_mask = read_mask(&mut r, &shapes)?;
        let free = read_mask(&mut r, &shapes)?;
        registry.register(t, task_mask, free).map_err(|e| Error::Format(format!("task {t}: {e}")))?;
    }
    let mut rest = [0u8; 1];
    ensure!(r.read(&mut rest)? == 0, Format, "trailing bytes after the last task");
    Ok((model, registry, CheckpointMeta { version, density }))
}

pub fn load_checkpoint(path: impl AsRef<Path>) -> Result<(ModelState, MaskRegistry, CheckpointMeta)> {
    decode_checkpoint(BufReader::new(File::open(path)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mask::{free_mask, threshold_topk, ScoreTensor};
    use crate::network::init_signed_kaiming;
    use crate::rng;
    use proptest::prelude::*;

    #[test]
    fn storage_bits_by_hand() {
        assert_eq!(storage_bits(1000, 0.1, 3).unwrap(), 33_000);
        assert_eq!(storage_bits(1000, 0.5, 4).unwrap(), 65_000);
        assert_eq!(storage_bits(1000, 0.3, 0).unwrap(), 33_000);
        assert_eq!(storage_bits(50, 1.0, 5).unwrap(), 250 * 32 + 50);
        assert!(storage_bits(0, 0.1, 1).is_err());
        assert!(storage_bits(10, 0.0, 1).is_err());
        assert!(storage_bits(10, 1.5, 1).is_err());
        assert_eq!(storage_bits_for_shapes(&[(10, 100)], 0.1, 3).unwrap(), 33_000);
    }

    fn state(seed: u64, widths: &[usize], tasks: usize, density: f64) -> (ModelState, MaskRegistry) {
        let mut model = init_signed_kaiming(&mlp_specs(widths), seed).unwrap();
        let mut r = rng::stream(seed, &[99]);
        for w in model.weights_mut() {
            w.mapv_inplace(|x| x * rand::Rng::random_range(&mut r, -2.0f32..2.0));
        }
        let shapes = model.shapes();
        let mut reg = MaskRegistry::new();
        let mut previous: Vec<Supermask> = Vec::new();
        for t in 0..tasks {
            let m = threshold_topk(&ScoreTensor::uniform(&shapes, &mut r), density).unwrap();
            let refs: Vec<&Supermask> = previous.iter().collect();
            let f = free_mask(&m, &refs).unwrap();
            reg.register(t, m.clone(), f).unwrap();
            previous.push(m);
        }
        (model, reg)
    }

    #[test]
    fn layout_size_by_hand() {
        let dir = tempfile::tempdir().unwrap();
        let (model, reg) = state(1, &[3, 5, 2], 2, 0.4);
        let n = save_checkpoint(dir.path().join("c"), &model, &reg, 0.4).unwrap();
        // header 4+2+2+2·8+2+4 = 30; weights 4·(15+10) = 100; masks 2 tasks · 2 · (2+2) = 16
        assert_eq!(n, 146);
        assert_eq!(checkpoint_bytes(&model.shapes(), 2), 146);
        assert_eq!(std::fs::metadata(dir.path().join("c")).unwrap().len(), 146);
        let empty = MaskRegistry::new();
        assert_eq!(save_checkpoint(dir.path().join("e"), &model, &empty, 0.4).unwrap(), 130);
    }

    #[test]
    fn round_trip_is_exact_and_stable() {
        let dir = tempfile::tempdir().unwrap();
        let (model, reg) = state(2, &[7, 9, 4], 3, 0.2);
        let a = dir.path().join("a");
        let b = dir.path().join("b");
        save_checkpoint(&a, &model, &reg, 0.2).unwrap();
        let (m2, r2, meta) = load_checkpoint(&a).unwrap();
        assert_eq!(meta, CheckpointMeta { version: VERSION, density: 0.2 });
        for (x, y) in model.weights().iter().zip(m2.weights()) {
            assert!(x.iter().zip(y.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
        }
        assert_eq!(r2, reg);
        save_checkpoint(&b, &m2, &r2, meta.density).unwrap();
        assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    }

    #[test]
    fn corrupt_files_fail_cleanly() {
        let (model, reg) = state(3, &[4, 3, 2], 1, 0.5);
        let bytes = encode_checkpoint(&model, &reg, 0.5).unwrap();
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(matches!(decode_checkpoint(&bad[..]), Err(Error::Format(_))));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(decode_checkpoint(&bad[..]), Err(Error::Format(_))));
        match decode_checkpoint(&bytes[..bytes.len() - 1]) {
            Err(Error::Io(e)) => assert_eq!(e.kind(), std::io::ErrorKind::UnexpectedEof),
            other => panic!("expected eof, got {other:?}"),
        }
        let mut long = bytes.clone();
        long.push(0);
        assert!(matches!(decode_checkpoint(&long[..]), Err(Error::Format(_))));
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]
        #[test]
        fn random_states_round_trip(
            seed in any::<u64>(),
            widths in prop::collection::vec(1usize..9, 2..5),
            tasks in 0usize..5,
            density in 0.05f64..1.0,
        ) {
            let (model, reg) = state(seed, &widths, tasks, density);
            let bytes = encode_checkpoint(&model, &reg, density as f32).unwrap();
            prop_assert_eq!(bytes.len() as u64, checkpoint_bytes(&model.shapes(), tasks));
            let (m2, r2, _) = decode_checkpoint(&bytes[..]).unwrap();
            prop_assert_eq!(encode_checkpoint(&m2, &r2, density as f32).unwrap(), bytes);
            prop_assert_eq!(r2, reg);
        }
    }
}
