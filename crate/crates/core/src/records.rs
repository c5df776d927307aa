//! Activation records: the metadata released alongside a trained network.
//!
//! Stats records hold a per-class mean and Cholesky factor for the top layer
//! (or every layer). Spectral records hold truncated graph spectra of a few
//! exemplar activation signals per class. All records serialize to a single
//! self-describing little-endian file.

use std::collections::BTreeMap;
use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::{LabeledImageSet, PixelStats};
use crate::error::{Error, Result};
use crate::nn::checkpoint::ModelHash;
use crate::nn::{BatchTrace, DenseNetwork, DropoutSpec};
use crate::spectral::{
    activation_slots, retained_count, truncate, GraphId, NetworkGraph, SparseSpectrum, SpectralBasis, SpectralMode,
};

pub const RECORD_MAGIC: &[u8; 8] = b"DFKDREC1";

/// Mean and lower Cholesky factor of one layer's activations for one class.
#[derive(Clone, Debug, PartialEq)]
pub struct LayerStats {
    pub layer_index: usize,
    /// `T` for the top layer, 1 for hidden layers.
    pub temperature_applied: f64,
    pub mean: Array1<f64>,
    pub chol: Array2<f64>,
}

impl LayerStats {
    /// Stats of `samples` (one row per observation, already divided by the temperature).
    pub fn from_samples(samples: ArrayView2<f64>, layer_index: usize, temperature_applied: f64) -> Result<Self> {
        let (mean, cov) = covariance(samples)?;
        let (chol, _) = jittered_cholesky(&cov)?;
        Ok(Self {
            layer_index,
            temperature_applied,
            mean,
            chol,
        })
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// `Ch·Chᵀ`.
    pub fn covariance(&self) -> Array2<f64> {
        self.chol.dot(&self.chol.t())
    }

    /// `count` rows of `ReLU(μ + Ch·z)` with `z ∼ N(0, I)`.
    pub fn sample_rows<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Array2<f64> {
        let mut out = self.sample_rows_linear(count, rng);
        out.mapv_inplace(|v| v.max(0.0));
        out
    }

    /// Rows of `μ + Ch·z` before the ReLU.
    pub fn sample_rows_linear<R: Rng + ?Sized>(&self, count: usize, rng: &mut R) -> Array2<f64> {
        let z = Array2::from_shape_simple_fn((count, self.dim()), || rng.sample::<f64, _>(StandardNormal));
        let mut out = z.dot(&self.chol.t());
        out += &self.mean;
        out
    }

    fn validate(&self) -> Result<()> {
        let d = self.dim();
        if self.chol.dim() != (d, d) {
            return Err(Error::shape(format!("Cholesky factor is {:?} for {d} units", self.chol.dim())));
        }
        for ((i, j), &v) in self.chol.indexed_iter() {
            if !v.is_finite() || (j > i && v != 0.0) || (i == j && v < 0.0) {
                return Err(Error::numeric(format!("invalid Cholesky entry ({i}, {j}) = {v}")));
            }
        }
        if !self.mean.iter().all(|v| v.is_finite()) {
            return Err(Error::numeric("non-finite mean"));
        }
        Ok(())
    }
}

pub fn sample_activation<R: Rng + ?Sized>(stats: &LayerStats, rng: &mut R) -> Array1<f64> {
    stats.sample_rows(1, rng).row(0).to_owned()
}

/// Mean and unbiased covariance of the rows of `samples`.
pub fn covariance(samples: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = samples.nrows();
    if n < 2 {
        return Err(Error::usage(format!("covariance needs at least 2 samples, got {n}")));
    }
    let mean = samples.mean_axis(Axis(0)).expect("non-empty");
    let centered = &samples - &mean;
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    Ok((mean, cov))
}

/// Cholesky factor of `cov + λI` with `λ = 1e-6·max(diag, 1e-12)`, growing λ
/// tenfold up to three times on failure. Returns the factor and the λ used.
pub fn jittered_cholesky(cov: &Array2<f64>) -> Result<(Array2<f64>, f64)> {
    let d = cov.nrows();
    let max_diag = cov.diag().iter().fold(0.0f64, |m, &v| m.max(v));
    let mut jitter = 1e-6 * max_diag.max(1e-12);
    for _ in 0..4 {
        let m = DMatrix::from_fn(d, d, |i, j| cov[[i, j]] + if i == j { jitter } else { 0.0 });
        if let Some(ch) = nalgebra::Cholesky::new(m) {
            let l = ch.l();
            return Ok((Array2::from_shape_fn((d, d), |(i, j)| l[(i, j)]), jitter));
        }
        jitter *= 10.0;
    }
    Err(Error::numeric(format!(
        "covariance of dimension {d} is not positive definite even with jitter {:e}",
        jitter / 10.0
    )))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StatsScope {
    TopLayerOnly,
    AllLayers,
}

#[derive(Clone, Debug, PartialEq)]
pub struct StatsRecord {
    pub scope: StatsScope,
    pub temperature: f64,
    /// Dropout rate to freeze during reconstruction, if the record asks for it.
    pub dropout_rate: Option<f64>,
    pub per_class: BTreeMap<u8, Vec<LayerStats>>,
}

/// Truncated spectrum of one exemplar signal on one graph.
#[derive(Clone, Debug, PartialEq)]
pub struct CompressedSignal {
    pub graph: GraphId,
    pub graph_size: u32,
    pub coefficients: SparseSpectrum,
}

#[derive(Clone, Debug, PartialEq)]
pub struct SpectralRecord {
    pub mode: SpectralMode,
    pub retain_fraction: f64,
    pub exemplars_per_class: usize,
    /// Per class, one entry per exemplar holding one signal per graph.
    pub per_class: BTreeMap<u8, Vec<Vec<CompressedSignal>>>,
}

#[derive(Clone, Debug, PartialEq)]
pub enum ActivationRecord {
    Stats(StatsRecord),
    Spectral(SpectralRecord),
    PixelStats(PixelStats),
}

impl ActivationRecord {
    pub fn kind(&self) -> u8 {
        match self {
            ActivationRecord::Stats(r) if r.scope == StatsScope::TopLayerOnly => 1,
            ActivationRecord::Stats(_) => 2,
            ActivationRecord::Spectral(r) if r.mode == SpectralMode::AllLayers => 3,
            ActivationRecord::Spectral(_) => 4,
            ActivationRecord::PixelStats(_) => 5,
        }
    }

    pub fn classes(&self) -> Vec<u8> {
        match self {
            ActivationRecord::Stats(r) => r.per_class.keys().copied().collect(),
            ActivationRecord::Spectral(r) => r.per_class.keys().copied().collect(),
            ActivationRecord::PixelStats(_) => Vec::new(),
        }
    }
}

fn class_trace(net: &DenseNetwork<f32>, set: &LabeledImageSet, rows: &[usize]) -> Result<BatchTrace<f32>> {
    let x = set.images.select(Axis(0), rows);
    net.forward_batch(x.view(), 1.0, &DropoutSpec::off())
}

fn check_record_inputs(net: &DenseNetwork<f32>, set: &LabeledImageSet, temperature: f64) -> Result<Vec<Vec<usize>>> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(Error::usage(format!("temperature must be positive, got {temperature}")));
    }
    if set.dim() != net.input_dim() {
        return Err(Error::shape(format!(
            "images have {} pixels, network expects {}",
            set.dim(),
            net.input_dim()
        )));
    }
    let classes = set.class_indices();
    if let Some((c, idx)) = classes.iter().enumerate().find(|(_, idx)| idx.len() == 1) {
        return Err(Error::usage(format!("class {c} has {} sample(s); statistics need at least 2", idx.len())));
    }
    if classes.iter().all(|idx| idx.is_empty()) {
        return Err(Error::usage("no samples to record"));
    }
    Ok(classes)
}

fn top_stats(trace: &BatchTrace<f32>, temperature: f64) -> Result<LayerStats> {
    let top = trace.pre_activations.len() - 1;
    let scaled = trace.pre_activations[top].mapv(|v| v as f64 / temperature);
    LayerStats::from_samples(scaled.view(), top, temperature)
}

/// Per-class statistics of the top layer's pre-softmax values divided by `T`.
pub fn record_top_layer_stats(net: &DenseNetwork<f32>, set: &LabeledImageSet, temperature: f64) -> Result<StatsRecord> {
    let classes = check_record_inputs(net, set, temperature)?;
    let mut per_class = BTreeMap::new();
    for (label, rows) in classes.iter().enumerate().filter(|(_, r)| !r.is_empty()) {
        let trace = class_trace(net, set, rows)?;
        per_class.insert(label as u8, vec![top_stats(&trace, temperature)?]);
    }
    Ok(StatsRecord {
        scope: StatsScope::TopLayerOnly,
        temperature,
        dropout_rate: None,
        per_class,
    })
}

/// Per-class statistics of every layer: post-ReLU hidden activations at `T = 1`
/// (dropout off) and the top layer as in [`record_top_layer_stats`].
pub fn record_all_layer_stats(
    net: &DenseNetwork<f32>,
    set: &LabeledImageSet,
    temperature: f64,
    dropout_rate: Option<f64>,
) -> Result<StatsRecord> {
    if let Some(rate) = dropout_rate {
        if !(0.0..1.0).contains(&rate) {
            return Err(Error::usage(format!("dropout rate must be in [0, 1), got {rate}")));
        }
    }
    let classes = check_record_inputs(net, set, temperature)?;
    let mut per_class = BTreeMap::new();
    for (label, rows) in classes.iter().enumerate().filter(|(_, r)| !r.is_empty()) {
        let trace = class_trace(net, set, rows)?;
        let top = net.layer_count() - 1;
        let mut layers = Vec::with_capacity(net.layer_count());
        for k in 0..top {
            let acts = trace.post_activations[k].mapv(|v| v as f64);
            layers.push(LayerStats::from_samples(acts.view(), k, 1.0)?);
        }
        layers.push(top_stats(&trace, temperature)?);
        per_class.insert(label as u8, layers);
    }
    Ok(StatsRecord {
        scope: StatsScope::AllLayers,
        temperature,
        dropout_rate,
        per_class,
    })
}

/// Compresses `exemplars_per_class` randomly chosen training signals per class
/// on every graph of `bases`.
pub fn record_spectral<R: Rng + ?Sized>(
    net: &DenseNetwork<f32>,
    set: &LabeledImageSet,
    mode: SpectralMode,
    bases: &[(NetworkGraph, SpectralBasis)],
    retain_fraction: f64,
    exemplars_per_class: usize,
    rng: &mut R,
) -> Result<SpectralRecord> {
    retained_count(retain_fraction, 1)?;
    if exemplars_per_class == 0 {
        return Err(Error::usage("exemplars per class must be at least 1"));
    }
    let expected = match mode {
        SpectralMode::AllLayers => 1,
        SpectralMode::LayerPairs => net.layer_count(),
    };
    let ids_ok = bases.iter().enumerate().all(|(k, (g, _))| match (mode, g.id) {
        (SpectralMode::AllLayers, GraphId::AllLayers) => true,
        (SpectralMode::LayerPairs, GraphId::LayerPair(p)) => p == k,
        _ => false,
    });
    if bases.len() != expected || !ids_ok {
        return Err(Error::usage(format!("bases do not match {mode:?} for a {}-layer network", net.layer_count())));
    }
    if set.dim() != net.input_dim() {
        return Err(Error::shape("image size does not match the network input"));
    }
    let mut per_class = BTreeMap::new();
    for (label, rows) in set.class_indices().iter().enumerate() {
        if rows.is_empty() {
            continue;
        }
        let picks = rand::seq::index::sample(rng, rows.len(), exemplars_per_class.min(rows.len()));
        let chosen: Vec<usize> = picks.iter().map(|i| rows[i]).collect();
        let trace = class_trace(net, set, &chosen)?;
        let slots = activation_slots(&trace);
        let mut exemplars = vec![Vec::with_capacity(bases.len()); chosen.len()];
        for (graph, basis) in bases {
            let spectra = basis.transform_rows(graph.signal_rows(&slots)?.view())?;
            for (e, spectrum) in spectra.rows().into_iter().enumerate() {
                exemplars[e].push(CompressedSignal {
                    graph: graph.id,
                    graph_size: graph.vertex_count() as u32,
                    coefficients: truncate(spectrum, retain_fraction)?,
                });
            }
        }
        per_class.insert(label as u8, exemplars);
    }
    Ok(SpectralRecord {
        mode,
        retain_fraction,
        exemplars_per_class,
        per_class,
    })
}

pub fn to_bytes(record: &ActivationRecord, model: &ModelHash) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(RECORD_MAGIC);
    out.push(record.kind());
    out.write_u32::<LittleEndian>(record.classes().len() as u32).unwrap();
    out.extend_from_slice(model);
    let f = |out: &mut Vec<u8>, v: f64| out.write_f64::<LittleEndian>(v).unwrap();
    let u = |out: &mut Vec<u8>, v: usize| out.write_u32::<LittleEndian>(v as u32).unwrap();
    match record {
        ActivationRecord::Stats(r) => {
            f(&mut out, r.temperature);
            out.push(r.dropout_rate.is_some() as u8);
            f(&mut out, r.dropout_rate.unwrap_or(0.0));
            u(&mut out, r.per_class.values().next().map_or(0, |l| l.len()));
            for (&label, layers) in &r.per_class {
                out.push(label);
                for s in layers {
                    u(&mut out, s.layer_index);
                    f(&mut out, s.temperature_applied);
                    u(&mut out, s.dim());
                    for &v in s.mean.iter() {
                        f(&mut out, v);
                    }
                    for i in 0..s.dim() {
                        for j in 0..=i {
                            f(&mut out, s.chol[[i, j]]);
                        }
                    }
                }
            }
        }
        ActivationRecord::Spectral(r) => {
            f(&mut out, r.retain_fraction);
            u(&mut out, r.exemplars_per_class);
            for (&label, exemplars) in &r.per_class {
                out.push(label);
                u(&mut out, exemplars.len());
                for signals in exemplars {
                    u(&mut out, signals.len());
                    for s in signals {
                        out.write_u32::<LittleEndian>(s.graph.code()).unwrap();
                        out.write_u32::<LittleEndian>(s.graph_size).unwrap();
                        u(&mut out, s.coefficients.len());
                        for &(i, v) in &s.coefficients {
                            out.write_u32::<LittleEndian>(i).unwrap();
                            f(&mut out, v);
                        }
                    }
                }
            }
        }
        ActivationRecord::PixelStats(p) => {
            f(&mut out, p.mean);
            f(&mut out, p.std);
        }
    }
    out
}

struct Reader<'a> {
    cur: Cursor<&'a [u8]>,
}

impl Reader<'_> {
    fn fail(e: std::io::Error) -> Error {
        Error::format("record", format!("truncated: {e}"))
    }

    fn remaining(&self) -> usize {
        self.cur.get_ref().len() - self.cur.position() as usize
    }

    fn u8(&mut self) -> Result<u8> {
        self.cur.read_u8().map_err(Self::fail)
    }

    fn u32(&mut self) -> Result<u32> {
        self.cur.read_u32::<LittleEndian>().map_err(Self::fail)
    }

    /// A count whose items take at least `min_item_bytes` each.
    fn count(&mut self, min_item_bytes: usize) -> Result<usize> {
        let n = self.u32()? as usize;
        if n.saturating_mul(min_item_bytes) > self.remaining() {
            return Err(Error::format("record", format!("count {n} exceeds the remaining data")));
        }
        Ok(n)
    }

    fn f64(&mut self) -> Result<f64> {
        let v = self.cur.read_f64::<LittleEndian>().map_err(Self::fail)?;
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::format("record", "non-finite value"))
        }
    }

    fn f64s(&mut self, n: usize) -> Result<Vec<f64>> {
        if n.saturating_mul(8) > self.remaining() {
            return Err(Error::format("record", "truncated float block"));
        }
        (0..n).map(|_| self.f64()).collect()
    }
}

pub fn from_bytes(bytes: &[u8]) -> Result<(ModelHash, ActivationRecord)> {
    let mut r = Reader { cur: Cursor::new(bytes) };
    let mut magic = [0u8; 8];
    r.cur.read_exact(&mut magic).map_err(Reader::fail)?;
    if &magic != RECORD_MAGIC {
        return Err(Error::format("record", "bad magic or version"));
    }
    let kind = r.u8()?;
    let class_count = r.u32()? as usize;
    let mut model = [0u8; 32];
    r.cur.read_exact(&mut model).map_err(Reader::fail)?;
    let record = match kind {
        1 | 2 => {
            let temperature = r.f64()?;
            let has_dropout = r.u8()?;
            let rate = r.f64()?;
            let layer_count = r.count(0)?;
            let mut per_class = BTreeMap::new();
            for _ in 0..class_count {
                let label = r.u8()?;
                let mut layers = Vec::with_capacity(layer_count.min(64));
                for _ in 0..layer_count {
                    let layer_index = r.u32()? as usize;
                    let temperature_applied = r.f64()?;
                    let d = r.count(8)?;
                    let mean = Array1::from(r.f64s(d)?);
                    let packed = r.f64s(d * (d + 1) / 2)?;
                    let mut chol = Array2::zeros((d, d));
                    let mut it = packed.into_iter();
                    for i in 0..d {
                        for j in 0..=i {
                            chol[[i, j]] = it.next().expect("sized");
                        }
                    }
                    let s = LayerStats {
                        layer_index,
                        temperature_applied,
                        mean,
                        chol,
                    };
                    s.validate().map_err(|e| Error::format("record", e.to_string()))?;
                    layers.push(s);
                }
                if per_class.insert(label, layers).is_some() {
                    return Err(Error::format("record", format!("class {label} repeated")));
                }
            }
            ActivationRecord::Stats(StatsRecord {
                scope: if kind == 1 { StatsScope::TopLayerOnly } else { StatsScope::AllLayers },
                temperature,
                dropout_rate: (has_dropout != 0).then_some(rate),
                per_class,
            })
        }
        3 | 4 => {
            let retain_fraction = r.f64()?;
            let exemplars_per_class = r.u32()? as usize;
            let mut per_class = BTreeMap::new();
            for _ in 0..class_count {
                let label = r.u8()?;
                let n_ex = r.count(4)?;
                let mut exemplars = Vec::with_capacity(n_ex);
                for _ in 0..n_ex {
                    let n_sig = r.count(12)?;
                    let mut signals = Vec::with_capacity(n_sig);
                    for _ in 0..n_sig {
                        let graph = GraphId::from_code(r.u32()?);
                        let graph_size = r.u32()?;
                        let n = r.count(12)?;
                        let mut coefficients = Vec::with_capacity(n);
                        for _ in 0..n {
                            let i = r.u32()?;
                            if i >= graph_size || coefficients.last().is_some_and(|&(p, _)| p >= i) {
                                return Err(Error::format("record", format!("coefficient index {i} out of order or range")));
                            }
                            coefficients.push((i, r.f64()?));
                        }
                        signals.push(CompressedSignal {
                            graph,
                            graph_size,
                            coefficients,
                        });
                    }
                    exemplars.push(signals);
                }
                if per_class.insert(label, exemplars).is_some() {
                    return Err(Error::format("record", format!("class {label} repeated")));
                }
            }
            ActivationRecord::Spectral(SpectralRecord {
                mode: if kind == 3 { SpectralMode::AllLayers } else { SpectralMode::LayerPairs },
                retain_fraction,
                exemplars_per_class,
                per_class,
            })
        }
        5 => ActivationRecord::PixelStats(PixelStats {
            mean: r.f64()?,
            std: r.f64()?,
        }),
        other => return Err(Error::format("record", format!("unknown record kind {other}"))),
    };
    if r.remaining() != 0 {
        return Err(Error::format("record", format!("{} trailing bytes", r.remaining())));
    }
    Ok((model, record))
}

pub fn save_record(record: &ActivationRecord, model: &ModelHash, path: &Path) -> Result<()> {
    std::fs::write(path, to_bytes(record, model)).map_err(|e| Error::io(path, e))
}

pub fn load_record(path: &Path) -> Result<(ModelHash, ActivationRecord)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    from_bytes(&bytes)
}
