//! Parameter registry, gradient buffers, Adam, finite-difference gradient
//! checking and the checkpoint format.
//!
//! Every layer reads its weights from a [`ParamStore`] by [`ParamId`] and
//! writes partial derivatives into a private [`Gradients`] buffer laid out
//! like the store. Buffers are merged into the store with
//! [`ParamStore::accumulate`] in a fixed order before [`adam_step`].
//!
//! Checkpoint layout (all integers little-endian):
//!
//! ```text
//! "FTCLCKPT"            8 bytes
//! version               u32 (= 1)
//! entry count           u32
//! per entry:
//!   name length         u16, then UTF-8 name
//!   rank                u8, then `rank` dims as u32
//!   value, m, v         3 × numel f64
//! ```
//!
//! The optimizer step counter travels as a rank-0 entry named
//! `__adam_step`.

use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};

pub const CHECKPOINT_MAGIC: &[u8; 8] = b"FTCLCKPT";
pub const CHECKPOINT_VERSION: u32 = 1;
const STEP_ENTRY: &str = "__adam_step";

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub grad: Vec<f64>,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl ParamEntry {
    pub fn numel(&self) -> usize {
        self.value.len()
    }
}

/// Named, ordered collection of learnable tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
    step_count: u64,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Registers a tensor. Names must be unique.
    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], value: Vec<f64>) -> Result<ParamId> {
        let name = name.into();
        let numel: usize = shape.iter().product();
        if numel != value.len() {
            return Err(Error::dims(format!(
                "parameter `{name}` has {} values for shape {shape:?}",
                value.len()
            )));
        }
        if self.id(&name).is_some() || name == STEP_ENTRY {
            return Err(Error::InvalidConfig(format!("duplicate parameter `{name}`")));
        }
        self.entries.push(ParamEntry {
            name,
            shape: shape.to_vec(),
            grad: vec![0.0; numel],
            m: vec![0.0; numel],
            v: vec![0.0; numel],
            value,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn require(&self, name: &str) -> Result<ParamId> {
        self.id(name)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn entry(&self, id: ParamId) -> &ParamEntry {
        &self.entries[id.0]
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.entries[id.0].value
    }

    pub fn grad(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].grad
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.iter().map(ParamEntry::numel).sum()
    }

    pub fn step_count(&self) -> u64 {
        self.step_count
    }

    pub fn zero_grads(&mut self) {
        for e in &mut self.entries {
            e.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// Adds a gradient buffer into the store's gradients.
    pub fn accumulate(&mut self, grads: &Gradients) {
        assert_eq!(grads.bufs.len(), self.entries.len(), "gradient layout");
        for (e, g) in self.entries.iter_mut().zip(&grads.bufs) {
            for (a, b) in e.grad.iter_mut().zip(g) {
                *a += b;
            }
        }
    }

    /// Parameter values only, for equality checks that ignore optimizer
    /// state.
    pub fn same_values(&self, other: &ParamStore) -> bool {
        self.entries.len() == other.entries.len()
            && self
                .entries
                .iter()
                .zip(&other.entries)
                .all(|(a, b)| a.name == b.name && a.shape == b.shape && a.value == b.value)
    }
}

/// Gradient buffer parallel to a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    bufs: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_for(store: &ParamStore) -> Self {
        Self {
            bufs: store.entries.iter().map(|e| vec![0.0; e.numel()]).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.bufs[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.bufs[id.0]
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for b in &mut self.bufs {
            b.iter_mut().for_each(|x| *x *= factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.bufs.iter().flatten().all(|&x| x == 0.0)
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AdamConfig {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            lr: 1e-4,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

impl AdamConfig {
    pub fn with_lr(lr: f64) -> Self {
        Self {
            lr,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let in_unit = |b: f64| b > 0.0 && b < 1.0;
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return Err(Error::InvalidConfig(format!("lr must be non-negative, got {}", self.lr)));
        }
        if !in_unit(self.beta1) || !in_unit(self.beta2) {
            return Err(Error::InvalidConfig("Adam betas must lie in (0, 1)".into()));
        }
        if !(self.eps > 0.0) {
            return Err(Error::InvalidConfig("Adam eps must be positive".into()));
        }
        Ok(())
    }
}

/// One bias-corrected Adam update over every entry of the store.
pub fn adam_step(store: &mut ParamStore, cfg: &AdamConfig) -> Result<()> {
    cfg.validate()?;
    if let Some(bad) = store
        .entries
        .iter()
        .find(|e| e.grad.iter().any(|g| !g.is_finite()))
    {
        return Err(Error::NonFiniteGradient(bad.name.clone()));
    }
    store.step_count += 1;
    let t = store.step_count as i32;
    let bc1 = 1.0 - cfg.beta1.powi(t);
    let bc2 = 1.0 - cfg.beta2.powi(t);
    for e in &mut store.entries {
        for k in 0..e.value.len() {
            let g = e.grad[k];
            e.m[k] = cfg.beta1 * e.m[k] + (1.0 - cfg.beta1) * g;
            e.v[k] = cfg.beta2 * e.v[k] + (1.0 - cfg.beta2) * g * g;
            let m_hat = e.m[k] / bc1;
            let v_hat = e.v[k] / bc2;
            e.value[k] -= cfg.lr * m_hat / (v_hat.sqrt() + cfg.eps);
        }
    }
    Ok(())
}

#[derive(Clone, Debug)]
pub struct GradCheckConfig {
    pub step: f64,
    pub rtol: f64,
    /// Denominator floor of the relative error, so elements whose true
    /// gradient is ~0 are compared absolutely.
    pub floor: f64,
    /// Check a seeded subsample of this many elements when the store is
    /// larger; `None` checks all.
    pub max_elements: Option<usize>,
    /// Elements whose one-sided slopes differ by more than this are treated
    /// as sitting on a kink and skipped. `None` disables skipping.
    pub kink_tol: Option<f64>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            step: 1e-4,
            rtol: 1e-3,
            floor: 1e-5,
            max_elements: Some(400),
            kink_tol: Some(0.05),
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradMismatch {
    pub name: String,
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
    pub rel_error: f64,
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub skipped: usize,
    pub max_rel_error: f64,
    pub failures: Vec<GradMismatch>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }

    pub fn merge(&mut self, other: GradCheckReport) {
        self.checked += other.checked;
        self.skipped += other.skipped;
        self.max_rel_error = self.max_rel_error.max(other.max_rel_error);
        self.failures.extend(other.failures);
    }
}

/// Compares the analytic gradient produced by `loss_fn` against central
/// differences `(L(θ+e) − L(θ−e)) / 2e`.
///
/// `loss_fn` returns the loss and adds its gradient into the supplied
/// buffer. The store is restored before returning.
pub fn check_gradients<F>(mut loss_fn: F, store: &mut ParamStore, cfg: &GradCheckConfig) -> Result<GradCheckReport>
where
    F: FnMut(&ParamStore, &mut Gradients) -> Result<f64>,
{
    let mut analytic = Gradients::zeros_for(store);
    let base = loss_fn(store, &mut analytic)?;
    let mut scratch = Gradients::zeros_for(store);
    let again = loss_fn(store, &mut scratch)?;
    if base.to_bits() != again.to_bits() || scratch != analytic {
        return Err(Error::NonDeterministicLoss {
            first: base,
            second: again,
        });
    }

    let coords: Vec<(usize, usize)> = store
        .entries
        .iter()
        .enumerate()
        .flat_map(|(p, e)| (0..e.numel()).map(move |k| (p, k)))
        .collect();
    let picked: Vec<(usize, usize)> = match cfg.max_elements {
        Some(limit) if coords.len() > limit => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
            let mut idx = sample(&mut rng, coords.len(), limit).into_vec();
            idx.sort_unstable();
            idx.into_iter().map(|i| coords[i]).collect()
        }
        _ => coords,
    };

    let mut report = GradCheckReport::default();
    let h = cfg.step;
    for (p, k) in picked {
        let orig = store.entries[p].value[k];
        let mut eval = |store: &mut ParamStore, x: f64| -> Result<f64> {
            store.entries[p].value[k] = x;
            scratch.bufs.iter_mut().flatten().for_each(|g| *g = 0.0);
            loss_fn(store, &mut scratch)
        };
        let plus = eval(store, orig + h);
        let minus = eval(store, orig - h);
        store.entries[p].value[k] = orig;
        let (plus, minus) = (plus?, minus?);

        let numeric = (plus - minus) / (2.0 * h);
        if let Some(tol) = cfg.kink_tol {
            let fwd = (plus - base) / h;
            let bwd = (base - minus) / h;
            if (fwd - bwd).abs() > tol * numeric.abs().max(1.0) {
                report.skipped += 1;
                continue;
            }
        }
        let an = analytic.bufs[p][k];
        let rel = (an - numeric).abs() / an.abs().max(numeric.abs()).max(cfg.floor);
        report.checked += 1;
        report.max_rel_error = report.max_rel_error.max(rel);
        if rel > cfg.rtol {
            report.failures.push(GradMismatch {
                name: store.entries[p].name.clone(),
                index: k,
                analytic: an,
                numeric,
                rel_error: rel,
            });
        }
    }
    Ok(report)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(Error::TruncatedPayload)?;
        let s = self.buf.get(self.pos..end).ok_or(Error::TruncatedPayload)?;
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        let bytes = self.take(n.checked_mul(8).ok_or(Error::TruncatedPayload)?)?;
        Ok(bytes
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect())
    }
}

fn push_entry(out: &mut Vec<u8>, name: &str, shape: &[usize], tensors: [&[f64]; 3]) -> Result<()> {
    let name_len = u16::try_from(name.len())
        .map_err(|_| Error::InvalidConfig(format!("parameter name too long: {name}")))?;
    out.extend_from_slice(&name_len.to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.push(shape.len() as u8);
    for &d in shape {
        let d = u32::try_from(d).map_err(|_| Error::dims("dimension exceeds u32"))?;
        out.extend_from_slice(&d.to_le_bytes());
    }
    for t in tensors {
        for x in t {
            out.extend_from_slice(&x.to_le_bytes());
        }
    }
    Ok(())
}

pub fn checkpoint_to_bytes(store: &ParamStore) -> Result<Vec<u8>> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&((store.entries.len() + 1) as u32).to_le_bytes());
    for e in &store.entries {
        push_entry(&mut out, &e.name, &e.shape, [&e.value, &e.m, &e.v])?;
    }
    let step = [store.step_count as f64];
    push_entry(&mut out, STEP_ENTRY, &[], [&step, &[0.0], &[0.0]])?;
    Ok(out)
}

pub fn checkpoint_from_bytes(bytes: &[u8]) -> Result<ParamStore> {
    if bytes.len() < 8 || &bytes[..8] != CHECKPOINT_MAGIC {
        return Err(Error::NotACheckpoint);
    }
    let mut r = Reader { buf: bytes, pos: 8 };
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::UnsupportedVersion(version));
    }
    let count = r.u32()?;
    let mut store = ParamStore::new();
    for _ in 0..count {
        let name_len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Data("parameter name is not UTF-8".into()))?
            .to_string();
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let numel: usize = shape.iter().product();
        let value = r.f64s(numel)?;
        let m = r.f64s(numel)?;
        let v = r.f64s(numel)?;
        if name == STEP_ENTRY {
            store.step_count = value[0] as u64;
            continue;
        }
        let id = store.add(name, &shape, value)?;
        store.entries[id.0].m = m;
        store.entries[id.0].v = v;
    }
    if r.pos != bytes.len() {
        return Err(Error::Data("trailing bytes after checkpoint entries".into()));
    }
    Ok(store)
}

pub fn write_checkpoint(path: impl AsRef<Path>, store: &ParamStore) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, checkpoint_to_bytes(store)?).map_err(|e| Error::io(path, e))
}

pub fn read_checkpoint(path: impl AsRef<Path>) -> Result<ParamStore> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    checkpoint_from_bytes(&bytes)
}
