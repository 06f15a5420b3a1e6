//! Binary dataset (`CSAD`) and checkpoint (`CSAM`) files.
//!
//! All integers and floats are little-endian.
//!
//! Dataset layout:
//!
//! ```text
//! "CSAD" | version u32 | state_dim u32 | action_dim u32 | count u64
//! count × (s[state_dim] a[action_dim] s_n[state_dim]) as f32
//! ```
//!
//! Checkpoint layout:
//!
//! ```text
//! "CSAM" | version u32 | kind u32
//! has_schedule u8 [sigma_min f64 | sigma_max f64 | sigma_data f64 | rho f64 | steps u32]
//! n_meta u32 | n_meta × (key_len u16 | key utf8 | value f64)
//! n_arrays u32 | n_arrays × (name_len u16 | name utf8 | ndim u32 | dims u32[ndim])
//! array data in manifest order, f32
//! ```

use std::fs;
use std::io::{self, Read, Write};
use std::path::Path;

use std::sync::Arc;

use crate::data::TransitionDataset;
use crate::error::{Error, Result};
use crate::nn::{Layout, Params};
use crate::schedule::ScheduleParams;

pub const DATASET_MAGIC: &[u8; 4] = b"CSAD";
pub const CHECKPOINT_MAGIC: &[u8; 4] = b"CSAM";
pub const FORMAT_VERSION: u32 = 1;

const DATASET_HEADER_LEN: u64 = 4 + 4 + 4 + 4 + 8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum ModelKind {
    Teacher,
    StudentCsa,
    StudentCsaDagger,
    Forward,
    Ddpm,
    Lambda,
}

impl ModelKind {
    pub fn code(self) -> u32 {
        match self {
            ModelKind::Teacher => 0,
            ModelKind::StudentCsa => 1,
            ModelKind::StudentCsaDagger => 2,
            ModelKind::Forward => 3,
            ModelKind::Ddpm => 4,
            ModelKind::Lambda => 5,
        }
    }

    pub fn from_code(code: u32) -> Result<Self> {
        Ok(match code {
            0 => ModelKind::Teacher,
            1 => ModelKind::StudentCsa,
            2 => ModelKind::StudentCsaDagger,
            3 => ModelKind::Forward,
            4 => ModelKind::Ddpm,
            5 => ModelKind::Lambda,
            other => return Err(Error::format(format!("unknown model kind {other}"))),
        })
    }

    /// Kinds whose files must carry Karras schedule parameters.
    pub fn needs_schedule(self) -> bool {
        matches!(self, ModelKind::Teacher | ModelKind::StudentCsa | ModelKind::StudentCsaDagger | ModelKind::Lambda)
    }

    pub fn name(self) -> &'static str {
        match self {
            ModelKind::Teacher => "teacher",
            ModelKind::StudentCsa => "student_csa",
            ModelKind::StudentCsaDagger => "student_csa_dagger",
            ModelKind::Forward => "forward",
            ModelKind::Ddpm => "ddpm",
            ModelKind::Lambda => "lambda",
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NamedArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f32>,
}

/// In-memory image of a checkpoint file.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: ModelKind,
    pub schedule: Option<ScheduleParams>,
    /// Architecture dims and scalar hyperparameters, in file order.
    pub meta: Vec<(String, f64)>,
    pub arrays: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn new(kind: ModelKind, schedule: Option<ScheduleParams>) -> Self {
        Self { kind, schedule, meta: vec![], arrays: vec![] }
    }

    pub fn set_meta(&mut self, key: &str, value: f64) {
        match self.meta.iter_mut().find(|(k, _)| k == key) {
            Some(entry) => entry.1 = value,
            None => self.meta.push((key.to_string(), value)),
        }
    }

    pub fn meta(&self, key: &str) -> Result<f64> {
        self.meta
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| *v)
            .ok_or_else(|| Error::format(format!("checkpoint is missing meta key {key:?}")))
    }

    pub fn meta_usize(&self, key: &str) -> Result<usize> {
        let v = self.meta(key)?;
        if v < 0.0 || v.fract() != 0.0 {
            return Err(Error::format(format!("meta {key:?} = {v} is not a count")));
        }
        Ok(v as usize)
    }

    pub fn array(&self, name: &str) -> Result<&NamedArray> {
        self.arrays
            .iter()
            .find(|a| a.name == name)
            .ok_or_else(|| Error::format(format!("checkpoint is missing array {name:?}")))
    }

    pub fn require_schedule(&self) -> Result<ScheduleParams> {
        self.schedule.ok_or_else(|| Error::format(format!("{} checkpoint has no schedule", self.kind.name())))
    }

    pub fn validate(&self) -> Result<()> {
        if self.kind.needs_schedule() && self.schedule.is_none() {
            return Err(Error::format(format!("{} checkpoints must carry schedule parameters", self.kind.name())));
        }
        for a in &self.arrays {
            let n: usize = a.shape.iter().product();
            if n != a.data.len() {
                return Err(Error::format(format!(
                    "array {:?} has shape {:?} but {} values",
                    a.name,
                    a.shape,
                    a.data.len()
                )));
            }
        }
        Ok(())
    }
}

/// Appends every tensor of `params` as `{prefix}{name}`.
pub fn push_params(ck: &mut Checkpoint, prefix: &str, params: &Params<f32>) {
    for spec in params.layout().specs() {
        ck.arrays.push(NamedArray {
            name: format!("{prefix}{}", spec.name),
            shape: spec.shape.clone(),
            data: params.as_slice()[spec.offset..spec.offset + spec.len()].to_vec(),
        });
    }
}

/// Rebuilds a parameter buffer for `layout` from `{prefix}{name}` arrays.
pub fn load_params(ck: &Checkpoint, prefix: &str, layout: Arc<Layout>) -> Result<Params<f32>> {
    let mut data = vec![0.0f32; layout.len()];
    for spec in layout.specs() {
        let name = format!("{prefix}{}", spec.name);
        let a = ck.array(&name)?;
        if a.shape != spec.shape {
            return Err(Error::format(format!(
                "array {name:?} has shape {:?}, model expects {:?}",
                a.shape, spec.shape
            )));
        }
        data[spec.offset..spec.offset + spec.len()].copy_from_slice(&a.data);
    }
    Params::from_vec(layout, data)
}

/// Writes to a sibling temp file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let name = path
        .file_name()
        .ok_or_else(|| Error::Io(io::Error::new(io::ErrorKind::InvalidInput, "path has no file name")))?;
    let tmp = dir.join(format!(".{}.tmp{}", name.to_string_lossy(), std::process::id()));
    {
        let mut f = fs::File::create(&tmp)?;
        f.write_all(bytes)?;
        f.sync_all()?;
    }
    fs::rename(&tmp, path).inspect_err(|_| {
        let _ = fs::remove_file(&tmp);
    })?;
    Ok(())
}

pub fn encode_dataset(ds: &TransitionDataset) -> Vec<u8> {
    let n = ds.len();
    let rec = 2 * ds.state_dim() + ds.action_dim();
    let mut out = Vec::with_capacity(DATASET_HEADER_LEN as usize + n * rec * 4);
    out.extend_from_slice(DATASET_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&(ds.state_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(ds.action_dim() as u32).to_le_bytes());
    out.extend_from_slice(&(n as u64).to_le_bytes());
    for i in 0..n {
        for v in ds.state(i).iter().chain(ds.action(i)).chain(ds.next_state(i)) {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn decode_dataset(bytes: &[u8]) -> Result<TransitionDataset> {
    let mut r = Cursor::new(bytes);
    r.magic(DATASET_MAGIC)?;
    r.version()?;
    let state_dim = r.u32()? as usize;
    let action_dim = r.u32()? as usize;
    let count = r.u64()?;
    if action_dim == 0 {
        return Err(Error::format("dataset action_dim must be positive"));
    }
    let rec = (2 * state_dim + action_dim) as u64 * 4;
    let expected = count
        .checked_mul(rec)
        .and_then(|b| b.checked_add(DATASET_HEADER_LEN))
        .ok_or_else(|| Error::format("dataset size overflows"))?;
    if bytes.len() as u64 != expected {
        return Err(Error::format(format!("dataset file is {} bytes, header implies {expected}", bytes.len())));
    }
    let count = count as usize;
    let mut states = Vec::with_capacity(count * state_dim);
    let mut actions = Vec::with_capacity(count * action_dim);
    let mut next = Vec::with_capacity(count * state_dim);
    for _ in 0..count {
        for _ in 0..state_dim {
            states.push(r.f32()?);
        }
        for _ in 0..action_dim {
            actions.push(r.f32()?);
        }
        for _ in 0..state_dim {
            next.push(r.f32()?);
        }
    }
    TransitionDataset::from_parts(state_dim, action_dim, states, actions, next)
}

pub fn write_dataset(path: &Path, ds: &TransitionDataset) -> Result<()> {
    write_atomic(path, &encode_dataset(ds))
}

pub fn read_dataset(path: &Path) -> Result<TransitionDataset> {
    decode_dataset(&read_all(path)?)
}

pub fn encode_checkpoint(ck: &Checkpoint) -> Result<Vec<u8>> {
    ck.validate()?;
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
    out.extend_from_slice(&ck.kind.code().to_le_bytes());
    match &ck.schedule {
        Some(s) => {
            out.push(1);
            for v in [s.sigma_min, s.sigma_max, s.sigma_data, s.rho] {
                out.extend_from_slice(&v.to_le_bytes());
            }
            out.extend_from_slice(&(s.steps as u32).to_le_bytes());
        }
        None => out.push(0),
    }
    out.extend_from_slice(&(ck.meta.len() as u32).to_le_bytes());
    for (k, v) in &ck.meta {
        put_str(&mut out, k)?;
        out.extend_from_slice(&v.to_le_bytes());
    }
    out.extend_from_slice(&(ck.arrays.len() as u32).to_le_bytes());
    for a in &ck.arrays {
        put_str(&mut out, &a.name)?;
        out.extend_from_slice(&(a.shape.len() as u32).to_le_bytes());
        for &d in &a.shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
    }
    for a in &ck.arrays {
        for v in &a.data {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<Checkpoint> {
    let mut r = Cursor::new(bytes);
    r.magic(CHECKPOINT_MAGIC)?;
    r.version()?;
    let kind = ModelKind::from_code(r.u32()?)?;
    let schedule = match r.u8()? {
        0 => None,
        1 => Some(ScheduleParams {
            sigma_min: r.f64()?,
            sigma_max: r.f64()?,
            sigma_data: r.f64()?,
            rho: r.f64()?,
            steps: r.u32()? as usize,
        }),
        other => return Err(Error::format(format!("bad schedule flag {other}"))),
    };
    let n_meta = r.u32()? as usize;
    let mut meta = Vec::with_capacity(n_meta.min(1024));
    for _ in 0..n_meta {
        let k = r.string()?;
        meta.push((k, r.f64()?));
    }
    let n_arrays = r.u32()? as usize;
    let mut manifest = Vec::with_capacity(n_arrays.min(1024));
    for _ in 0..n_arrays {
        let name = r.string()?;
        let ndim = r.u32()? as usize;
        let shape = (0..ndim).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
        manifest.push((name, shape));
    }
    let mut arrays = Vec::with_capacity(manifest.len());
    for (name, shape) in manifest {
        let n: usize = shape.iter().product();
        if n.saturating_mul(4) > r.remaining() {
            return Err(Error::format(format!("truncated data for array {name:?}")));
        }
        let data = (0..n).map(|_| r.f32()).collect::<Result<Vec<_>>>()?;
        arrays.push(NamedArray { name, shape, data });
    }
    if r.remaining() != 0 {
        return Err(Error::format(format!("{} trailing bytes after checkpoint", r.remaining())));
    }
    let ck = Checkpoint { kind, schedule, meta, arrays };
    ck.validate()?;
    Ok(ck)
}

pub fn write_checkpoint(path: &Path, ck: &Checkpoint) -> Result<()> {
    write_atomic(path, &encode_checkpoint(ck)?)
}

pub fn read_checkpoint(path: &Path) -> Result<Checkpoint> {
    decode_checkpoint(&read_all(path)?)
}

fn read_all(path: &Path) -> Result<Vec<u8>> {
    let mut buf = Vec::new();
    fs::File::open(path)?.read_to_end(&mut buf)?;
    Ok(buf)
}

fn put_str(out: &mut Vec<u8>, s: &str) -> Result<()> {
    let len = u16::try_from(s.len()).map_err(|_| Error::format(format!("name too long: {s:?}")))?;
    out.extend_from_slice(&len.to_le_bytes());
    out.extend_from_slice(s.as_bytes());
    Ok(())
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn new(bytes: &'a [u8]) -> Self {
        Self { bytes, pos: 0 }
    }

    fn remaining(&self) -> usize {
        self.bytes.len() - self.pos
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.remaining() < n {
            return Err(Error::format(format!("truncated file: needed {n} bytes at offset {}", self.pos)));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("length checked"))
    }

    fn magic(&mut self, want: &[u8; 4]) -> Result<()> {
        let got = self.take(4)?;
        if got != want {
            return Err(Error::format(format!(
                "bad magic {:?}, expected {:?}",
                String::from_utf8_lossy(got),
                String::from_utf8_lossy(want)
            )));
        }
        Ok(())
    }

    fn version(&mut self) -> Result<()> {
        let v = self.u32()?;
        if v != FORMAT_VERSION {
            return Err(Error::format(format!("unsupported format version {v}")));
        }
        Ok(())
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn f32(&mut self) -> Result<f32> {
        Ok(f32::from_le_bytes(self.array()?))
    }

    fn f64(&mut self) -> Result<f64> {
        Ok(f64::from_le_bytes(self.array()?))
    }

    fn string(&mut self) -> Result<String> {
        let len = u16::from_le_bytes(self.array()?) as usize;
        String::from_utf8(self.take(len)?.to_vec()).map_err(|_| Error::format("name is not utf-8"))
    }
}
