//! Deep kernel networks.
//!
//! A network maps the vector of base kernel values of a sample pair to one
//! nonnegative similarity. Unit `p` of layer `l + 1` is
//!
//! ```text
//! k_p^(l+1) = relu( sum_q w_qp^(l) * k_q^(l) )
//! ```
//!
//! so the network is a fully connected ReLU perceptron whose input layer is
//! the base kernel vector and whose last layer has a single unit. Weights are
//! learned by backpropagating a gradient with respect to the output kernel.

use rayon::prelude::*;

use crate::base_kernels::KernelBank;
use crate::codec::{Reader, Writer};
use crate::error::{Error, Result};
use crate::matrix::SquareMatrix;

const MODEL_MAGIC: &[u8; 4] = b"DKNW";
const MODEL_VERSION: u32 = 1;

/// Layer widths `[n1, n2, ..., nL]`, input first, with `nL = 1`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Architecture {
    layer_sizes: Vec<usize>,
}

impl Architecture {
    pub fn new(layer_sizes: Vec<usize>) -> Result<Self> {
        if layer_sizes.len() < 2 {
            return Err(Error::invalid("an architecture needs at least 2 layers"));
        }
        if layer_sizes.contains(&0) {
            return Err(Error::invalid("layer sizes must be positive"));
        }
        if *layer_sizes.last().unwrap() != 1 {
            return Err(Error::invalid("the output layer must have exactly one unit"));
        }
        Ok(Self { layer_sizes })
    }

    /// `n1` inputs, `hidden_layers` layers of `width` units, then the output unit.
    pub fn uniform(n1: usize, width: usize, hidden_layers: usize) -> Result<Self> {
        let mut sizes = vec![n1];
        sizes.extend(std::iter::repeat_n(width, hidden_layers));
        sizes.push(1);
        Self::new(sizes)
    }

    pub fn layer_sizes(&self) -> &[usize] {
        &self.layer_sizes
    }

    pub fn input_size(&self) -> usize {
        self.layer_sizes[0]
    }

    pub fn num_layers(&self) -> usize {
        self.layer_sizes.len()
    }

    /// Multiply-accumulate operations of one forward pass, `sum_l n_l * n_(l+1)`.
    pub fn mac_count(&self) -> usize {
        self.layer_sizes.windows(2).map(|w| w[0] * w[1]).sum()
    }

    pub fn num_weights(&self) -> usize {
        self.mac_count()
    }

    fn max_width(&self) -> usize {
        *self.layer_sizes.iter().max().unwrap()
    }
}

/// One weight matrix per layer transition; matrix `l` is `n_l x n_(l+1)`
/// stored row-major, so `w[q * n_(l+1) + p]` connects unit `q` to unit `p`.
pub type Weights = Vec<Vec<f64>>;

#[derive(Debug, Clone, PartialEq)]
pub struct KernelNetwork {
    arch: Architecture,
    weights: Weights,
}

/// Intermediate values of one forward pass.
///
/// `activations[0]` is the base kernel vector; for `l >= 1`,
/// `activations[l] = max(0, pre_activations[l - 1])`.
#[derive(Debug, Clone, PartialEq)]
pub struct ForwardTrace {
    pub pre_activations: Vec<Vec<f64>>,
    pub activations: Vec<Vec<f64>>,
    pub output: f64,
}

/// Reusable buffers for allocation-free forward passes.
#[derive(Debug, Clone)]
pub struct Scratch {
    a: Vec<f64>,
    b: Vec<f64>,
}

impl Scratch {
    pub fn new(arch: &Architecture) -> Self {
        let w = arch.max_width();
        Self {
            a: vec![0.0; w],
            b: vec![0.0; w],
        }
    }
}

#[inline]
fn relu(x: f64) -> f64 {
    if x > 0.0 {
        x
    } else {
        0.0
    }
}

// Subgradient at exactly 0 is taken as 0.
#[inline]
fn relu_grad(pre: f64) -> f64 {
    if pre > 0.0 {
        1.0
    } else {
        0.0
    }
}

impl KernelNetwork {
    /// Every weight of matrix `l` set to `1 / n_l`: each unit starts as the
    /// plain average of the layer below.
    pub fn init_flat(arch: &Architecture) -> Self {
        let weights = arch
            .layer_sizes
            .windows(2)
            .map(|w| vec![1.0 / w[0] as f64; w[0] * w[1]])
            .collect();
        Self {
            arch: arch.clone(),
            weights,
        }
    }

    pub fn from_weights(arch: Architecture, weights: Weights) -> Result<Self> {
        if weights.len() != arch.num_layers() - 1 {
            return Err(Error::invalid(format!(
                "expected {} weight matrices, got {}",
                arch.num_layers() - 1,
                weights.len()
            )));
        }
        for (l, (w, sz)) in weights.iter().zip(arch.layer_sizes.windows(2)).enumerate() {
            if w.len() != sz[0] * sz[1] {
                return Err(Error::invalid(format!(
                    "weight matrix {l} has {} entries, expected {}x{}",
                    w.len(),
                    sz[0],
                    sz[1]
                )));
            }
            if w.iter().any(|v| !v.is_finite()) {
                return Err(Error::invalid(format!("weight matrix {l} has non-finite entries")));
            }
        }
        Ok(Self { arch, weights })
    }

    pub fn arch(&self) -> &Architecture {
        &self.arch
    }

    pub fn weights(&self) -> &Weights {
        &self.weights
    }

    pub fn zero_grads(&self) -> Weights {
        self.weights.iter().map(|w| vec![0.0; w.len()]).collect()
    }

    pub fn all_finite(&self) -> bool {
        self.weights.iter().flatten().all(|v| v.is_finite())
    }

    /// `w <- w - step * grads`.
    pub fn apply_gradient(&mut self, grads: &Weights, step: f64) {
        for (w, g) in self.weights.iter_mut().zip(grads) {
            for (wi, gi) in w.iter_mut().zip(g) {
                *wi -= step * gi;
            }
        }
    }

    pub fn forward(&self, base: &[f64]) -> Result<ForwardTrace> {
        if base.len() != self.arch.input_size() {
            return Err(Error::invalid(format!(
                "base vector has length {}, network expects {}",
                base.len(),
                self.arch.input_size()
            )));
        }
        Ok(self.forward_trace(base))
    }

    pub(crate) fn forward_trace(&self, base: &[f64]) -> ForwardTrace {
        let sizes = &self.arch.layer_sizes;
        let mut activations = Vec::with_capacity(sizes.len());
        let mut pre_activations = Vec::with_capacity(sizes.len() - 1);
        activations.push(base.to_vec());
        for (l, w) in self.weights.iter().enumerate() {
            let n_out = sizes[l + 1];
            let input = &activations[l];
            let mut z = vec![0.0; n_out];
            for (q, &a) in input.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &w[q * n_out..(q + 1) * n_out];
                for (zp, &wqp) in z.iter_mut().zip(row) {
                    *zp += wqp * a;
                }
            }
            activations.push(z.iter().map(|&v| relu(v)).collect());
            pre_activations.push(z);
        }
        let output = activations.last().unwrap()[0];
        ForwardTrace {
            pre_activations,
            activations,
            output,
        }
    }

    /// Output only, reusing `scratch`. Gives bit-identical results to [`forward`](Self::forward).
    pub fn forward_value(&self, base: &[f64], scratch: &mut Scratch) -> f64 {
        debug_assert_eq!(base.len(), self.arch.input_size());
        let sizes = &self.arch.layer_sizes;
        let Scratch { a, b } = scratch;
        a[..base.len()].copy_from_slice(base);
        for (l, w) in self.weights.iter().enumerate() {
            let (n_in, n_out) = (sizes[l], sizes[l + 1]);
            let z = &mut b[..n_out];
            z.fill(0.0);
            for q in 0..n_in {
                let act = a[q];
                if act == 0.0 {
                    continue;
                }
                let row = &w[q * n_out..(q + 1) * n_out];
                for (zp, &wqp) in z.iter_mut().zip(row) {
                    *zp += wqp * act;
                }
            }
            for v in z.iter_mut() {
                *v = relu(*v);
            }
            std::mem::swap(a, b);
        }
        a[0]
    }

    /// Gradient of `J` with respect to every weight, given `dJ/dkappa` at the output.
    pub fn backward(&self, trace: &ForwardTrace, dj_dkappa: f64) -> Result<Weights> {
        self.check_trace(trace)?;
        let mut grads = self.zero_grads();
        self.backward_accumulate(trace, dj_dkappa, &mut grads);
        Ok(grads)
    }

    fn check_trace(&self, trace: &ForwardTrace) -> Result<()> {
        let sizes = &self.arch.layer_sizes;
        let ok = trace.activations.len() == sizes.len()
            && trace.pre_activations.len() == sizes.len() - 1
            && trace.activations.iter().zip(sizes).all(|(a, &n)| a.len() == n)
            && trace.pre_activations.iter().zip(&sizes[1..]).all(|(z, &n)| z.len() == n);
        if ok {
            Ok(())
        } else {
            Err(Error::invalid("forward trace does not match the network architecture"))
        }
    }

    /// Adds the weight gradient for one trace into `grads`.
    pub fn backward_accumulate(&self, trace: &ForwardTrace, dj_dkappa: f64, grads: &mut Weights) {
        if dj_dkappa == 0.0 {
            return;
        }
        let sizes = &self.arch.layer_sizes;
        let last = sizes.len() - 1;
        let mut delta: Vec<f64> = trace.pre_activations[last - 1]
            .iter()
            .map(|&z| dj_dkappa * relu_grad(z))
            .collect();
        for l in (0..last).rev() {
            let n_out = sizes[l + 1];
            let input = &trace.activations[l];
            let g = &mut grads[l];
            for (q, &a) in input.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let row = &mut g[q * n_out..(q + 1) * n_out];
                for (gp, &dp) in row.iter_mut().zip(&delta) {
                    *gp += a * dp;
                }
            }
            if l == 0 {
                break;
            }
            let w = &self.weights[l];
            let pre = &trace.pre_activations[l - 1];
            delta = (0..sizes[l])
                .map(|q| {
                    let rg = relu_grad(pre[q]);
                    if rg == 0.0 {
                        return 0.0;
                    }
                    let row = &w[q * n_out..(q + 1) * n_out];
                    rg * row.iter().zip(&delta).map(|(w, d)| w * d).sum::<f64>()
                })
                .collect();
        }
    }

    /// Kernel value for one pair of samples.
    pub fn kernel(&self, bank: &KernelBank, x: &[f64], y: &[f64]) -> Result<f64> {
        self.check_bank(bank)?;
        let base = bank.base_kernel_vector(x, y)?;
        Ok(self.forward_trace(&base).output)
    }

    fn check_bank(&self, bank: &KernelBank) -> Result<()> {
        if bank.num_chunks() != self.arch.input_size() {
            return Err(Error::invalid(format!(
                "bank has {} chunks, network expects {} inputs",
                bank.num_chunks(),
                self.arch.input_size()
            )));
        }
        Ok(())
    }

    /// Full `l x l` Gram matrix. Entries are computed for `i <= j` and mirrored;
    /// the diagonal is evaluated, not assumed.
    pub fn gram_matrix(&self, bank: &KernelBank, samples: &[Vec<f64>]) -> Result<SquareMatrix> {
        if samples.is_empty() {
            return Err(Error::invalid("gram matrix of an empty sample list"));
        }
        self.check_bank(bank)?;
        if let Some(i) = samples.iter().position(|s| s.len() != bank.dim()) {
            return Err(Error::invalid(format!(
                "sample {i} has dimension {}, bank expects {}",
                samples[i].len(),
                bank.dim()
            )));
        }
        let n = samples.len();
        let upper: Vec<Vec<f64>> = (0..n)
            .into_par_iter()
            .map_init(
                || (Scratch::new(&self.arch), vec![0.0; bank.num_chunks()]),
                |(scratch, base), i| {
                    (i..n)
                        .map(|j| {
                            bank.base_kernel_into(&samples[i], &samples[j], base);
                            self.forward_value(base, scratch)
                        })
                        .collect()
                },
            )
            .collect();
        let mut m = SquareMatrix::zeros(n);
        for (i, row) in upper.iter().enumerate() {
            for (off, &v) in row.iter().enumerate() {
                m.set(i, i + off, v);
                m.set(i + off, i, v);
            }
        }
        Ok(m)
    }

    /// `kappa(x, refs[k])` for each reference sample.
    pub fn kernel_row(&self, bank: &KernelBank, x: &[f64], refs: &[&[f64]]) -> Vec<f64> {
        let mut scratch = Scratch::new(&self.arch);
        let mut base = vec![0.0; bank.num_chunks()];
        refs.iter()
            .map(|r| {
                bank.base_kernel_into(x, r, &mut base);
                self.forward_value(&base, &mut scratch)
            })
            .collect()
    }

    pub(crate) fn encode(&self, w: &mut Writer) {
        let sizes = &self.arch.layer_sizes;
        w.u32(sizes.len() as u32);
        for &s in sizes {
            w.u64(s as u64);
        }
        for m in &self.weights {
            w.f64s(m);
        }
    }

    pub(crate) fn decode(r: &mut Reader<'_>) -> Result<Self> {
        let at = r.offset();
        let nl = r.u32()? as usize;
        if !(2..=1024).contains(&nl) {
            return Err(Error::Parse {
                offset: at,
                message: format!("implausible layer count {nl}"),
            });
        }
        let mut sizes = Vec::with_capacity(nl);
        for _ in 0..nl {
            let at = r.offset();
            let s = r.u64()?;
            if s == 0 || s > 1 << 20 {
                return Err(Error::Parse {
                    offset: at,
                    message: format!("implausible layer size {s}"),
                });
            }
            sizes.push(s as usize);
        }
        let arch = Architecture::new(sizes).map_err(|e| Error::Parse {
            offset: at,
            message: e.to_string(),
        })?;
        let weights = arch
            .layer_sizes
            .windows(2)
            .map(|w| r.f64s(w[0] * w[1]))
            .collect::<Result<Weights>>()?;
        Self::from_weights(arch, weights).map_err(|e| Error::Parse {
            offset: r.offset(),
            message: e.to_string(),
        })
    }

    /// Standalone model file: magic, version, architecture, row-major weights.
    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new();
        w.bytes(MODEL_MAGIC);
        w.u32(MODEL_VERSION);
        self.encode(&mut w);
        w.finish()
    }

    pub fn from_bytes(data: &[u8]) -> Result<Self> {
        let mut r = Reader::new(data);
        r.expect_magic(MODEL_MAGIC)?;
        let version = r.u32()?;
        if version != MODEL_VERSION {
            return Err(Error::Version {
                kind: "model",
                found: version,
                expected: MODEL_VERSION,
            });
        }
        let net = Self::decode(&mut r)?;
        r.finish()?;
        Ok(net)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_net(sizes: &[usize], seed: u64) -> KernelNetwork {
        let arch = Architecture::new(sizes.to_vec()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let weights = sizes
            .windows(2)
            .map(|w| (0..w[0] * w[1]).map(|_| rng.gen_range(-0.5..1.0)).collect())
            .collect();
        KernelNetwork::from_weights(arch, weights).unwrap()
    }

    /// Dense oracle: explicit matrix-vector products with explicit indexing.
    fn dense_oracle(net: &KernelNetwork, base: &[f64]) -> f64 {
        let sizes = net.arch().layer_sizes();
        let mut act = base.to_vec();
        for l in 0..sizes.len() - 1 {
            let mut next = vec![0.0; sizes[l + 1]];
            for p in 0..sizes[l + 1] {
                let mut s = 0.0;
                for q in 0..sizes[l] {
                    s += net.weights()[l][q * sizes[l + 1] + p] * act[q];
                }
                next[p] = s.max(0.0);
            }
            act = next;
        }
        act[0]
    }

    #[test]
    fn architecture_validation() {
        assert!(Architecture::new(vec![3]).is_err());
        assert!(Architecture::new(vec![3, 2]).is_err());
        assert!(Architecture::new(vec![3, 0, 1]).is_err());
        let a = Architecture::uniform(4, 2, 3).unwrap();
        assert_eq!(a.layer_sizes(), &[4, 2, 2, 2, 1]);
        assert_eq!(Architecture::new(vec![2, 2, 2, 1]).unwrap().mac_count(), 10);
    }

    #[test]
    fn flat_init_shapes_and_values() {
        let net = KernelNetwork::init_flat(&Architecture::new(vec![2, 1]).unwrap());
        assert_eq!(net.weights(), &vec![vec![0.5, 0.5]]);
        let deep = KernelNetwork::init_flat(&Architecture::uniform(128, 128, 7).unwrap());
        assert_eq!(deep.weights().len(), 8);
        assert!(deep.weights()[0].iter().all(|&w| w == 1.0 / 128.0));
    }

    #[test]
    fn flat_init_is_fixed_point_on_ones() {
        for sizes in [vec![2, 1], vec![5, 3, 1], vec![8, 8, 8, 8, 1], vec![16, 2, 2, 2, 1]] {
            let net = KernelNetwork::init_flat(&Architecture::new(sizes.clone()).unwrap());
            let out = net.forward(&vec![1.0; sizes[0]]).unwrap().output;
            assert!((out - 1.0).abs() < 1e-12, "{sizes:?} -> {out}");
        }
    }

    #[test]
    fn zero_weights_give_zero() {
        let arch = Architecture::new(vec![3, 2, 1]).unwrap();
        let net = KernelNetwork::from_weights(arch, vec![vec![0.0; 6], vec![0.0; 2]]).unwrap();
        assert_eq!(net.forward(&[0.2, 0.5, 0.9]).unwrap().output, 0.0);
    }

    #[test]
    fn relu_clamps_negative_output() {
        let arch = Architecture::new(vec![2, 1]).unwrap();
        let net = KernelNetwork::from_weights(arch, vec![vec![1.0, -1.0]]).unwrap();
        let t = net.forward(&[0.3, 0.8]).unwrap();
        assert!((t.pre_activations[0][0] + 0.5).abs() < 1e-15);
        assert_eq!(t.output, 0.0);
    }

    #[test]
    fn forward_matches_dense_oracle() {
        let net = random_net(&[4, 3, 1], 11);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut scratch = Scratch::new(net.arch());
        for _ in 0..20 {
            let base: Vec<f64> = (0..4).map(|_| rng.gen_range(0.0..1.0)).collect();
            let t = net.forward(&base).unwrap();
            assert!((t.output - dense_oracle(&net, &base)).abs() <= 1e-12);
            assert_eq!(t.output, net.forward_value(&base, &mut scratch));
            for (a, z) in t.activations[1..].iter().zip(&t.pre_activations) {
                for (ai, zi) in a.iter().zip(z) {
                    assert_eq!(*ai, zi.max(0.0));
                }
            }
        }
        assert!(net.forward(&[0.1; 3]).is_err());
    }

    #[test]
    fn backward_trivial_cases() {
        let net = random_net(&[4, 3, 1], 2);
        let t = net.forward(&[0.1, 0.4, 0.9, 1.0]).unwrap();
        let g = net.backward(&t, 0.0).unwrap();
        assert!(g.iter().flatten().all(|&v| v == 0.0));

        let arch = Architecture::new(vec![1, 1]).unwrap();
        let single = KernelNetwork::from_weights(arch, vec![vec![0.7]]).unwrap();
        let t = single.forward(&[0.6]).unwrap();
        let g = single.backward(&t, 2.5).unwrap();
        assert!((g[0][0] - 2.5 * 0.6).abs() < 1e-15);

        let other = random_net(&[4, 2, 1], 2);
        assert!(other.backward(&t, 1.0).is_err());
    }

    #[test]
    fn backward_matches_central_differences() {
        let h = 1e-6;
        for seed in 0..5 {
            let net = random_net(&[4, 3, 1], 100 + seed);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let base: Vec<f64> = (0..4).map(|_| rng.gen_range(0.05..1.0)).collect();
            let t = net.forward(&base).unwrap();
            if t.output == 0.0 {
                continue;
            }
            let dj = 1.7;
            let grads = net.backward(&t, dj).unwrap();
            for l in 0..grads.len() {
                for k in 0..grads[l].len() {
                    let mut plus = net.clone();
                    plus.weights[l][k] += h;
                    let mut minus = net.clone();
                    minus.weights[l][k] -= h;
                    let fd = dj * (plus.forward(&base).unwrap().output - minus.forward(&base).unwrap().output) / (2.0 * h);
                    let denom = fd.abs().max(grads[l][k].abs()).max(1e-8);
                    assert!((fd - grads[l][k]).abs() / denom < 1e-4, "l={l} k={k} fd={fd} an={}", grads[l][k]);
                }
            }
        }
    }

    #[test]
    fn gram_matrix_properties() {
        let bank = KernelBank::for_dim(4, vec![0.8, 1.6]).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let samples: Vec<Vec<f64>> = (0..10)
            .map(|_| (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect())
            .collect();

        let flat = KernelNetwork::init_flat(&Architecture::new(vec![2, 3, 1]).unwrap());
        let g = flat.gram_matrix(&bank, &samples).unwrap();
        for i in 0..10 {
            assert!((g.get(i, i) - 1.0).abs() < 1e-12);
        }

        let net = random_net(&[2, 3, 1], 4);
        let g = net.gram_matrix(&bank, &samples).unwrap();
        assert_eq!(g.max_asymmetry(), 0.0);
        for i in 0..10 {
            for j in 0..10 {
                let direct = net.forward(&bank.base_kernel_vector(&samples[i], &samples[j]).unwrap()).unwrap().output;
                assert_eq!(g.get(i, j), direct);
                assert!(direct >= 0.0);
            }
        }

        let one = net.gram_matrix(&bank, &samples[..1]).unwrap();
        assert_eq!(one.size(), 1);
        assert_eq!(one.get(0, 0), net.forward(&[1.0, 1.0]).unwrap().output);
        assert!(net.gram_matrix(&bank, &[]).is_err());
    }

    #[test]
    fn model_file_round_trip_is_bit_exact() {
        let net = random_net(&[5, 4, 2, 1], 77);
        let bytes = net.to_bytes();
        let back = KernelNetwork::from_bytes(&bytes).unwrap();
        assert_eq!(back.to_bytes(), bytes);
        for (a, b) in net.weights().iter().flatten().zip(back.weights().iter().flatten()) {
            assert_eq!(a.to_bits(), b.to_bits());
        }
        assert!(matches!(KernelNetwork::from_bytes(&bytes[..bytes.len() - 3]), Err(Error::Parse { .. })));
        let mut bad = bytes.clone();
        bad[4] = 9;
        assert!(matches!(KernelNetwork::from_bytes(&bad), Err(Error::Version { .. })));
    }
}
