//! Graph signal processing over a dense network.
//!
//! Neurons are vertices and weights are edges of an undirected graph, so the
//! adjacency is symmetric and has a real orthonormal eigenbasis `V`. The
//! forward transform is `Vᵀ s`; the inverse zero-pads the missing coefficients
//! and multiplies by `V`.

use std::io::{Cursor, Read};
use std::path::Path;

use byteorder::{LittleEndian, ReadBytesExt, WriteBytesExt};
use nalgebra::DMatrix;
use ndarray::{Array1, Array2, ArrayView1, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::checkpoint::ModelHash;
use crate::nn::{BatchTrace, DenseNetwork, Real};

/// Sparse spectrum: `(coefficient index, value)` with strictly increasing indices.
pub type SparseSpectrum = Vec<(u32, f64)>;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpectralMode {
    /// One graph over the input, hidden and output units.
    AllLayers,
    /// One bipartite graph per consecutive pair of activation slots.
    LayerPairs,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum GraphId {
    AllLayers,
    /// Graph over slots `k` and `k + 1` (slot 0 is the input, slot `k + 1` the output of layer `k`).
    LayerPair(usize),
}

impl GraphId {
    pub fn code(self) -> u32 {
        match self {
            GraphId::AllLayers => u32::MAX,
            GraphId::LayerPair(k) => k as u32,
        }
    }

    pub fn from_code(code: u32) -> Self {
        if code == u32::MAX {
            GraphId::AllLayers
        } else {
            GraphId::LayerPair(code as usize)
        }
    }

    fn tag(self) -> String {
        match self {
            GraphId::AllLayers => "all".to_string(),
            GraphId::LayerPair(k) => format!("pair{k}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct NetworkGraph {
    pub id: GraphId,
    /// Activation slots covered by the graph, in vertex order.
    pub slots: Vec<usize>,
    /// First vertex of each covered slot.
    pub offsets: Vec<usize>,
    pub adjacency: Array2<f64>,
}

impl NetworkGraph {
    pub fn vertex_count(&self) -> usize {
        self.adjacency.nrows()
    }

    /// Vertex index of unit `unit` in activation slot `slot`.
    pub fn vertex(&self, slot: usize, unit: usize) -> Option<usize> {
        let pos = self.slots.iter().position(|&s| s == slot)?;
        let end = self.offsets.get(pos + 1).copied().unwrap_or(self.vertex_count());
        let v = self.offsets[pos] + unit;
        (v < end).then_some(v)
    }

    /// Concatenates the slot vectors covered by this graph into one signal.
    /// `slot_values[s]` is the activation of slot `s`.
    pub fn signal<F: Real>(&self, slot_values: &[ArrayView1<F>]) -> Result<Array1<f64>> {
        let mut out = Vec::with_capacity(self.vertex_count());
        for &s in &self.slots {
            let v = slot_values
                .get(s)
                .ok_or_else(|| Error::shape(format!("no activation for slot {s}")))?;
            out.extend(v.iter().map(|x| x.to_f64().expect("finite")));
        }
        if out.len() != self.vertex_count() {
            return Err(Error::shape(format!(
                "signal length {} != vertex count {}",
                out.len(),
                self.vertex_count()
            )));
        }
        Ok(Array1::from(out))
    }

    /// Signals of a batch, one row per sample, from per-slot activation rows.
    pub fn signal_rows<F: Real>(&self, slot_values: &[ArrayView2<F>]) -> Result<Array2<f64>> {
        let rows = slot_values.first().map_or(0, |v| v.nrows());
        let mut out = Array2::zeros((rows, self.vertex_count()));
        for (pos, &s) in self.slots.iter().enumerate() {
            let v = slot_values
                .get(s)
                .ok_or_else(|| Error::shape(format!("no activation for slot {s}")))?;
            let end = self.offsets.get(pos + 1).copied().unwrap_or(self.vertex_count());
            if v.ncols() != end - self.offsets[pos] || v.nrows() != rows {
                return Err(Error::shape(format!("slot {s} activation is {:?}", v.dim())));
            }
            out.slice_mut(ndarray::s![.., self.offsets[pos]..end])
                .assign(&v.mapv(|x| x.to_f64().expect("finite")));
        }
        Ok(out)
    }

    /// Splits a signal back into per-slot pieces, `(slot, values)`.
    pub fn split(&self, signal: ArrayView1<f64>) -> Vec<(usize, Array1<f64>)> {
        self.slots
            .iter()
            .enumerate()
            .map(|(i, &s)| {
                let end = self.offsets.get(i + 1).copied().unwrap_or(self.vertex_count());
                (s, signal.slice(ndarray::s![self.offsets[i]..end]).to_owned())
            })
            .collect()
    }
}

/// Per-slot activations used as graph signals: the input, post-ReLU hidden
/// activations, and the pre-softmax values of the final layer.
pub fn activation_slots<F: Real>(trace: &BatchTrace<F>) -> Vec<ArrayView2<'_, F>> {
    let last = trace.pre_activations.len() - 1;
    std::iter::once(trace.input.view())
        .chain(trace.post_activations[..last].iter().map(|a| a.view()))
        .chain(std::iter::once(trace.pre_activations[last].view()))
        .collect()
}

/// Graphs of `net` under `mode` paired with their bases, using the on-disk cache when given.
pub fn network_bases<F: Real>(
    net: &DenseNetwork<F>,
    mode: SpectralMode,
    model: &ModelHash,
    cache_dir: Option<&Path>,
) -> Result<Vec<(NetworkGraph, SpectralBasis)>> {
    build_graph(net, mode)
        .into_iter()
        .map(|g| {
            let b = cached_basis(&g, model, cache_dir)?;
            Ok((g, b))
        })
        .collect()
}

/// Builds the weight graph(s) of a network. Biases add no edges and there are
/// no self-loops.
pub fn build_graph<F: Real>(net: &DenseNetwork<F>, mode: SpectralMode) -> Vec<NetworkGraph> {
    let widths = net.widths();
    match mode {
        SpectralMode::AllLayers => {
            let slots: Vec<usize> = (0..widths.len()).collect();
            vec![assemble(net, GraphId::AllLayers, slots, &widths)]
        }
        SpectralMode::LayerPairs => (0..net.layer_count())
            .map(|k| assemble(net, GraphId::LayerPair(k), vec![k, k + 1], &widths))
            .collect(),
    }
}

fn assemble<F: Real>(net: &DenseNetwork<F>, id: GraphId, slots: Vec<usize>, widths: &[usize]) -> NetworkGraph {
    let mut offsets = Vec::with_capacity(slots.len());
    let mut n = 0;
    for &s in &slots {
        offsets.push(n);
        n += widths[s];
    }
    let mut adjacency = Array2::<f64>::zeros((n, n));
    // Layer k connects slot k (its input) to slot k + 1 (its output).
    for pos in 0..slots.len().saturating_sub(1) {
        let k = slots[pos];
        let weight = &net.layers()[k].weight;
        let (src, dst) = (offsets[pos], offsets[pos + 1]);
        for ((o, i), &w) in weight.indexed_iter() {
            let w = w.to_f64().expect("finite");
            adjacency[[dst + o, src + i]] = w;
            adjacency[[src + i, dst + o]] = w;
        }
    }
    NetworkGraph {
        id,
        slots,
        offsets,
        adjacency,
    }
}

/// Orthonormal eigenbasis of a symmetric adjacency.
///
/// Eigenpairs are ordered by descending `|λ|` (ties keep the solver's order)
/// and each eigenvector's first non-negligible component is positive.
#[derive(Clone, Debug, PartialEq)]
pub struct SpectralBasis {
    pub eigenvalues: Array1<f64>,
    /// Column `i` is the eigenvector of `eigenvalues[i]`.
    pub eigenvectors: Array2<f64>,
}

impl SpectralBasis {
    pub fn from_symmetric(adjacency: &Array2<f64>) -> Result<Self> {
        let n = adjacency.nrows();
        if adjacency.ncols() != n {
            return Err(Error::shape(format!("adjacency is {:?}, not square", adjacency.dim())));
        }
        if n == 0 {
            return Ok(Self {
                eigenvalues: Array1::zeros(0),
                eigenvectors: Array2::zeros((0, 0)),
            });
        }
        let m = DMatrix::from_fn(n, n, |i, j| adjacency[[i, j]]);
        let eig = m
            .try_symmetric_eigen(f64::EPSILON, 0)
            .ok_or_else(|| Error::numeric("symmetric eigensolver did not converge"))?;

        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .abs()
                .total_cmp(&eig.eigenvalues[a].abs())
                .then(a.cmp(&b))
        });

        let mut eigenvalues = Array1::zeros(n);
        let mut eigenvectors = Array2::zeros((n, n));
        for (col, &src) in order.iter().enumerate() {
            eigenvalues[col] = eig.eigenvalues[src];
            let v = eig.eigenvectors.column(src);
            let max = v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
            let lead = v.iter().find(|x| x.abs() > 1e-8 * max).copied().unwrap_or(1.0);
            let sign = if lead < 0.0 { -1.0 } else { 1.0 };
            for row in 0..n {
                eigenvectors[[row, col]] = sign * v[row];
            }
        }
        Ok(Self {
            eigenvalues,
            eigenvectors,
        })
    }

    pub fn len(&self) -> usize {
        self.eigenvalues.len()
    }

    pub fn is_empty(&self) -> bool {
        self.eigenvalues.is_empty()
    }

    /// `ŝ = Vᵀ s`.
    pub fn transform(&self, signal: ArrayView1<f64>) -> Result<Array1<f64>> {
        if signal.len() != self.len() {
            return Err(Error::shape(format!("signal length {} != basis size {}", signal.len(), self.len())));
        }
        Ok(self.eigenvectors.t().dot(&signal))
    }

    /// Row-wise transform of a batch of signals, one signal per row.
    pub fn transform_rows(&self, signals: ArrayView2<f64>) -> Result<Array2<f64>> {
        if signals.ncols() != self.len() {
            return Err(Error::shape(format!("signal length {} != basis size {}", signals.ncols(), self.len())));
        }
        Ok(signals.dot(&self.eigenvectors))
    }

    /// `s̄ = V ŝ` with the coefficients not listed taken as zero.
    pub fn inverse(&self, coefficients: &[(u32, f64)]) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(self.len());
        for &(i, c) in coefficients {
            let i = i as usize;
            if i >= self.len() {
                return Err(Error::usage(format!("coefficient index {i} outside basis of size {}", self.len())));
            }
            out.scaled_add(c, &self.eigenvectors.column(i));
        }
        Ok(out)
    }

    /// Inverse of a dense coefficient vector.
    pub fn inverse_dense(&self, coefficients: ArrayView1<f64>) -> Result<Array1<f64>> {
        if coefficients.len() != self.len() {
            return Err(Error::shape(format!(
                "{} coefficients for basis of size {}",
                coefficients.len(),
                self.len()
            )));
        }
        Ok(self.eigenvectors.dot(&coefficients))
    }
}

pub fn fourier_basis(graph: &NetworkGraph) -> Result<SpectralBasis> {
    SpectralBasis::from_symmetric(&graph.adjacency)
}

/// Number of coefficients kept out of `n` for a retain fraction.
pub fn retained_count(fraction: f64, n: usize) -> Result<usize> {
    if !(fraction > 0.0 && fraction <= 1.0) {
        return Err(Error::usage(format!("retain fraction must be in (0, 1], got {fraction}")));
    }
    // The small slack keeps products like 0.1·3790 from rounding up past an integer.
    let k = (fraction * n as f64 - 1e-9).ceil().max(0.0) as usize;
    Ok(k.clamp(n.min(1), n))
}

/// Keeps the `⌈fraction·N⌉` largest-magnitude coefficients (ties go to the
/// lower index), returned in increasing index order.
pub fn truncate(spectrum: ArrayView1<f64>, fraction: f64) -> Result<SparseSpectrum> {
    let k = retained_count(fraction, spectrum.len())?;
    let mut order: Vec<usize> = (0..spectrum.len()).collect();
    order.sort_by(|&a, &b| spectrum[b].abs().total_cmp(&spectrum[a].abs()).then(a.cmp(&b)));
    let mut kept: Vec<usize> = order.into_iter().take(k).collect();
    kept.sort_unstable();
    Ok(kept.into_iter().map(|i| (i as u32, spectrum[i])).collect())
}

pub const BASIS_MAGIC: &[u8; 8] = b"DFKDBAS1";

/// Cache layout: magic, model hash (32 bytes), N (u32 LE), eigenvalues (f64 LE),
/// eigenvectors row-major (f64 LE).
pub fn basis_to_bytes(basis: &SpectralBasis, model: &ModelHash) -> Vec<u8> {
    let n = basis.len();
    let mut out = Vec::with_capacity(44 + 8 * (n + n * n));
    out.extend_from_slice(BASIS_MAGIC);
    out.extend_from_slice(model);
    out.write_u32::<LittleEndian>(n as u32).unwrap();
    for &v in basis.eigenvalues.iter() {
        out.write_f64::<LittleEndian>(v).unwrap();
    }
    for &v in basis.eigenvectors.iter() {
        out.write_f64::<LittleEndian>(v).unwrap();
    }
    out
}

pub fn basis_from_bytes(bytes: &[u8]) -> Result<(ModelHash, SpectralBasis)> {
    let bad = |e: std::io::Error| Error::format("basis cache", format!("truncated: {e}"));
    let mut r = Cursor::new(bytes);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic).map_err(bad)?;
    if &magic != BASIS_MAGIC {
        return Err(Error::format("basis cache", "bad magic"));
    }
    let mut hash = [0u8; 32];
    r.read_exact(&mut hash).map_err(bad)?;
    let n = r.read_u32::<LittleEndian>().map_err(bad)? as usize;
    if bytes.len() as u64 != 44 + 8 * (n as u64 + n as u64 * n as u64) {
        return Err(Error::format("basis cache", format!("size does not match N = {n}")));
    }
    let mut values = vec![0.0; n];
    r.read_f64_into::<LittleEndian>(&mut values).map_err(bad)?;
    let mut vectors = vec![0.0; n * n];
    r.read_f64_into::<LittleEndian>(&mut vectors).map_err(bad)?;
    Ok((
        hash,
        SpectralBasis {
            eigenvalues: Array1::from(values),
            eigenvectors: Array2::from_shape_vec((n, n), vectors).expect("sized"),
        },
    ))
}

/// Basis of `graph`, read from `cache_dir` when a matching entry exists and
/// written there otherwise.
pub fn cached_basis(graph: &NetworkGraph, model: &ModelHash, cache_dir: Option<&Path>) -> Result<SpectralBasis> {
    let Some(dir) = cache_dir else {
        return fourier_basis(graph);
    };
    let path = dir.join(format!("basis-{}-{}.bin", &hex::encode(model)[..16], graph.id.tag()));
    if let Ok(bytes) = std::fs::read(&path) {
        match basis_from_bytes(&bytes) {
            Ok((hash, basis)) if &hash == model && basis.len() == graph.vertex_count() => return Ok(basis),
            Ok(_) => log::warn!("{}: stale basis cache, recomputing", path.display()),
            Err(e) => log::warn!("{}: {e}, recomputing", path.display()),
        }
    }
    log::info!("computing {}-vertex spectral basis ({})", graph.vertex_count(), graph.id.tag());
    let basis = fourier_basis(graph)?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    std::fs::write(&path, basis_to_bytes(&basis, model)).map_err(|e| Error::io(&path, e))?;
    Ok(basis)
}
