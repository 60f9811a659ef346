//! Checkpoint files, CSV export, metrics logs and dataset dumps.
//!
//! Checkpoint layout, all integers and floats little-endian:
//!
//! ```text
//! magic        4 bytes  "GRNN"
//! version      u32      1
//! cell_kind    u8       0 = gru, 1 = ghost
//! activation   u8       φ activation tag (0 = tanh, 1 = sigmoid, 2 = identity)
//! feature_dim  u32
//! state_dim    u32      full state S
//! ratio        u32      1 for gru
//! ghost_dim    u32      S − S/ratio
//! output_dim   u32      readout rows, 0 for a bare cell
//! n_tensors    u32
//! n_tensors × {
//!   name_len u32, name (UTF-8), rank u8, rank × u32 dims,
//!   prod(dims) × f64 values, row-major
//! }
//! ```
//!
//! Tensors appear in the bundle's canonical order. Tensors with no elements
//! (the φ and `W_gc` tensors of a ghost cell with `ghost_dim == 0`, or the
//! readout of a bare cell) are omitted.

use std::fs;
use std::io::Write as _;
use std::path::Path;

use serde::Serialize;

use crate::cells::{Activation, CellKind, CellParams, GhostParams, GruParams};
use crate::error::{Error, Result};
use crate::model::{Model, Readout};
use crate::params::Parameters;
use crate::tasks::{Dataset, Target};
use crate::trainer::EpochRecord;

pub const MAGIC: [u8; 4] = *b"GRNN";
pub const FORMAT_VERSION: u32 = 1;

fn kind_tag(kind: CellKind) -> u8 {
    match kind {
        CellKind::Gru => 0,
        CellKind::Ghost => 1,
    }
}

fn u32_of(v: usize, what: &str) -> Result<u32> {
    u32::try_from(v).map_err(|_| Error::InvalidArgument(format!("{what} {v} does not fit in u32")))
}

/// Serializes a model to the checkpoint byte layout.
pub fn encode(model: &Model) -> Result<Vec<u8>> {
    model.validate()?;
    let tensors = model.tensors();
    for t in &tensors {
        if let Some(bad) = t.values.iter().find(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!("tensor {} contains {bad}", t.name)));
        }
    }
    let stored: Vec<_> = tensors.iter().filter(|t| !t.values.is_empty()).collect();
    let cell = &model.cell;
    let activation = match cell {
        CellParams::Gru(_) => 0,
        CellParams::Ghost(g) => g.phi.activation.tag(),
    };
    let mut out = Vec::new();
    out.extend_from_slice(&MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.push(kind_tag(cell.kind()));
    out.push(activation);
    for (v, what) in [
        (cell.feature_dim(), "feature_dim"),
        (cell.state_dim(), "state_dim"),
        (cell.ratio(), "ratio"),
        (cell.ghost_dim(), "ghost_dim"),
        (model.readout.output_dim(), "output_dim"),
        (stored.len(), "tensor count"),
    ] {
        out.extend_from_slice(&u32_of(v, what)?.to_le_bytes());
    }
    for t in stored {
        let name = t.name.as_bytes();
        out.extend_from_slice(&u32_of(name.len(), "name length")?.to_le_bytes());
        out.extend_from_slice(name);
        let dims = t.shape.dims();
        out.push(dims.len() as u8);
        for d in dims {
            out.extend_from_slice(&u32_of(d, "dimension")?.to_le_bytes());
        }
        for v in t.values {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn save(model: &Model, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode(model)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        match end {
            Some(end) => {
                let s = &self.bytes[self.pos..end];
                self.pos = end;
                Ok(s)
            }
            None => Err(Error::Truncated(format!(
                "{what}: need {n} bytes at offset {}, file has {}",
                self.pos,
                self.bytes.len()
            ))),
        }
    }

    fn u8(&mut self, what: &str) -> Result<u8> {
        Ok(self.take(1, what)?[0])
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn usize(&mut self, what: &str) -> Result<usize> {
        Ok(self.u32(what)? as usize)
    }
}

fn mismatch(msg: String) -> Error {
    Error::TensorMismatch(msg)
}

/// Parses a checkpoint byte stream.
pub fn decode(bytes: &[u8]) -> Result<Model> {
    let mut r = Reader { bytes, pos: 0 };
    let magic: [u8; 4] = r.take(4, "magic")?.try_into().unwrap();
    if magic != MAGIC {
        return Err(Error::BadMagic(magic));
    }
    let version = r.u32("version")?;
    if version != FORMAT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let kind = match r.u8("cell kind")? {
        0 => CellKind::Gru,
        1 => CellKind::Ghost,
        t => return Err(mismatch(format!("unknown cell kind tag {t}"))),
    };
    let act_tag = r.u8("activation")?;
    let activation = Activation::from_tag(act_tag)
        .ok_or_else(|| mismatch(format!("unknown activation tag {act_tag}")))?;
    let feature_dim = r.usize("feature_dim")?;
    let state_dim = r.usize("state_dim")?;
    let ratio = r.usize("ratio")?;
    let ghost_dim = r.usize("ghost_dim")?;
    let output_dim = r.usize("output_dim")?;
    let n_tensors = r.usize("tensor count")?;

    if feature_dim == 0 || state_dim == 0 {
        return Err(mismatch(format!(
            "feature_dim {feature_dim} and state_dim {state_dim} must be positive"
        )));
    }
    let cell = match kind {
        CellKind::Gru => {
            if ratio != 1 || ghost_dim != 0 {
                return Err(mismatch(format!(
                    "gru checkpoint records ratio {ratio} and ghost_dim {ghost_dim}"
                )));
            }
            CellParams::Gru(GruParams::zeros(feature_dim, state_dim))
        }
        CellKind::Ghost => {
            let g = GhostParams::zeros(feature_dim, state_dim, ratio, activation)
                .map_err(|e| mismatch(format!("bad ghost dims: {e}")))?;
            if g.ghost_dim() != ghost_dim {
                return Err(mismatch(format!(
                    "ghost_dim {ghost_dim} inconsistent with state_dim {state_dim} and ratio {ratio}"
                )));
            }
            CellParams::Ghost(g)
        }
    };
    let mut model = Model {
        cell,
        readout: Readout::zeros(output_dim, state_dim),
    };

    let expected: Vec<(&'static str, Vec<usize>)> = model
        .tensors()
        .iter()
        .map(|t| (t.name, t.shape.dims()))
        .collect();
    let mut filled = vec![false; expected.len()];
    let mut slots = model.tensors_mut();
    for _ in 0..n_tensors {
        let name_len = r.usize("tensor name length")?;
        let name = std::str::from_utf8(r.take(name_len, "tensor name")?)
            .map_err(|_| mismatch("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8("tensor rank")? as usize;
        let mut dims = Vec::with_capacity(rank);
        for _ in 0..rank {
            dims.push(r.usize("tensor dims")?);
        }
        let idx = expected
            .iter()
            .position(|(n, _)| *n == name)
            .ok_or_else(|| mismatch(format!("unexpected tensor {name:?}")))?;
        if filled[idx] {
            return Err(mismatch(format!("duplicate tensor {name:?}")));
        }
        if dims != expected[idx].1 {
            return Err(mismatch(format!(
                "tensor {name:?} has dims {dims:?}, expected {:?}",
                expected[idx].1
            )));
        }
        let slot = &mut slots[idx];
        let raw = r.take(slot.len() * 8, &format!("values of {name}"))?;
        for (dst, chunk) in slot.iter_mut().zip(raw.chunks_exact(8)) {
            *dst = f64::from_le_bytes(chunk.try_into().unwrap());
        }
        filled[idx] = true;
    }
    drop(slots);
    for (i, (name, dims)) in expected.iter().enumerate() {
        if !filled[i] && dims.iter().product::<usize>() > 0 {
            return Err(mismatch(format!("missing tensor {name:?}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(mismatch(format!(
            "{} trailing bytes after the tensor table",
            bytes.len() - r.pos
        )));
    }
    Ok(model)
}

pub fn load(path: impl AsRef<Path>) -> Result<Model> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Formats `v` with `digits` significant digits, shortest form.
/// Infinities print as `inf` / `-inf`.
pub fn format_sig(v: f64, digits: usize) -> String {
    if v.is_nan() {
        return "nan".into();
    }
    if v.is_infinite() {
        return if v > 0.0 { "inf".into() } else { "-inf".into() };
    }
    let digits = digits.max(1);
    let rounded: f64 = format!("{:.*e}", digits - 1, v).parse().unwrap();
    format!("{rounded}")
}

fn csv_text<R: AsRef<[f64]>>(header: Option<&str>, rows: &[R], digits: usize) -> String {
    let mut s = String::new();
    if let Some(h) = header {
        s.push_str(h);
        s.push('\n');
    }
    for row in rows {
        let cells: Vec<String> = row.as_ref().iter().map(|&v| format_sig(v, digits)).collect();
        s.push_str(&cells.join(","));
        s.push('\n');
    }
    s
}

/// Writes comma-separated rows with `digits` significant digits.
pub fn export_csv<R: AsRef<[f64]>>(rows: &[R], path: impl AsRef<Path>, digits: usize) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, csv_text(None, rows, digits)).map_err(|e| Error::io(path, e))
}

/// As [`export_csv`] with a header line first.
pub fn export_csv_with_header<R: AsRef<[f64]>>(
    header: &str,
    rows: &[R],
    path: impl AsRef<Path>,
    digits: usize,
) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, csv_text(Some(header), rows, digits)).map_err(|e| Error::io(path, e))
}

/// One JSON object per line.
pub fn metrics_jsonl(records: &[EpochRecord]) -> Result<String> {
    let mut s = String::new();
    for r in records {
        s.push_str(&serde_json::to_string(r)?);
        s.push('\n');
    }
    Ok(s)
}

pub fn write_metrics_jsonl(records: &[EpochRecord], path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, metrics_jsonl(records)?).map_err(|e| Error::io(path, e))
}

#[derive(Serialize)]
struct DumpSidecar {
    task: crate::tasks::TaskKind,
    samples: usize,
    steps: usize,
    feature_dim: usize,
    /// Shape of `inputs.f64`.
    input_shape: [usize; 3],
    /// Shape of `targets.f64`.
    target_shape: Vec<usize>,
    target_kind: &'static str,
}

/// Writes `inputs.f64`, `targets.f64` (flat f64 little-endian, row-major)
/// and a `dataset.json` sidecar describing their shapes into `dir`.
/// Class labels are stored as f64.
pub fn dump_dataset(dataset: &Dataset, dir: impl AsRef<Path>) -> Result<()> {
    let dir = dir.as_ref();
    let first = dataset
        .samples
        .first()
        .ok_or_else(|| Error::Empty("dataset has no samples".into()))?;
    let steps = first.inputs.len();
    if dataset.samples.iter().any(|s| s.inputs.len() != steps) {
        return Err(Error::Shape("samples have different lengths".into()));
    }
    let mut inputs = Vec::new();
    let mut targets = Vec::new();
    for s in &dataset.samples {
        for x in &s.inputs {
            for v in x.iter() {
                inputs.extend_from_slice(&v.to_le_bytes());
            }
        }
        match &s.target {
            Target::Class(c) => targets.extend_from_slice(&(*c as f64).to_le_bytes()),
            Target::Scalar(y) => targets.extend_from_slice(&y.to_le_bytes()),
            Target::Frames(frames) => {
                for f in frames {
                    for v in f.iter() {
                        targets.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
    }
    let n = dataset.len();
    let (target_shape, target_kind) = match &first.target {
        Target::Class(_) => (vec![n], "class"),
        Target::Scalar(_) => (vec![n], "scalar"),
        Target::Frames(_) => (vec![n, steps, dataset.output_dim], "frames"),
    };
    let sidecar = DumpSidecar {
        task: dataset.kind,
        samples: n,
        steps,
        feature_dim: dataset.feature_dim,
        input_shape: [n, steps, dataset.feature_dim],
        target_shape,
        target_kind,
    };
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let write = |name: &str, bytes: &[u8]| {
        let p = dir.join(name);
        fs::File::create(&p)
            .and_then(|mut f| f.write_all(bytes))
            .map_err(|e| Error::io(&p, e))
    };
    write("inputs.f64", &inputs)?;
    write("targets.f64", &targets)?;
    write("dataset.json", serde_json::to_string_pretty(&sidecar)?.as_bytes())
}
