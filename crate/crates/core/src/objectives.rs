//! Loss terms for both training regimes.
//!
//! Supervised: per-layer KL-to-standard plus a classification upper bound,
//! and max-entropy erasure driving the carrier's prediction toward uniform.
//! Unsupervised: adversarial KL matching against a block-diagonal Gaussian
//! prior, permutation-based total-correlation penalty, and Bernoulli
//! reconstruction. Each term exists eagerly (tests, trace reconciliation)
//! and as a graph builder (training).

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{chol_logdet, chol_quadform, chol_trace_inverse, cholesky};
use crate::model::BlockLayout;
use crate::ndgrad::{Array, Graph, NodeId, Reduce};
use crate::nn::{
    cross_entropy_from_onehot_nodes, entropy_nodes, predictive_entropy, softmax_cross_entropy,
    Mlp,
};
use crate::rng::{Stream, StreamKind};

const PROB_CLAMP: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub beta: f64,
    pub gamma: f64,
}

impl LossWeights {
    pub fn new(beta: f64, gamma: f64) -> Result<Self> {
        if !beta.is_finite() || !gamma.is_finite() || beta < 0.0 || gamma < 0.0 {
            return Err(Error::Validation(format!(
                "loss weights must be finite and non-negative (beta={beta}, gamma={gamma})"
            )));
        }
        Ok(LossWeights { beta, gamma })
    }
}

/// The block-diagonal Gaussian prior N(0, Σ): equicorrelated feature blocks
/// (unit variance, off-diagonal ρ) and identity everywhere else.
#[derive(Clone, Debug)]
pub struct BlockPrior {
    dim: usize,
    rho: f64,
    feature_spans: Vec<(usize, usize)>,
    sigma: Vec<f64>,
    chol: Vec<f64>,
}

impl BlockPrior {
    pub fn new(dim: usize, feature_spans: &[(usize, usize)], rho: f64) -> Result<Self> {
        if !(rho.is_finite() && rho.abs() < 1.0) {
            return Err(Error::Validation(format!("|rho| must be < 1, got {rho}")));
        }
        let mut covered = 0usize;
        for &(offset, width) in feature_spans {
            if width == 0 || offset < covered || offset + width > dim {
                return Err(Error::Validation(format!(
                    "feature span ({offset}, {width}) invalid for dim {dim}"
                )));
            }
            covered = offset + width;
        }
        let mut sigma = vec![0.0; dim * dim];
        for i in 0..dim {
            sigma[i * dim + i] = 1.0;
        }
        for &(offset, width) in feature_spans {
            for i in offset..offset + width {
                for j in offset..offset + width {
                    if i != j {
                        sigma[i * dim + j] = rho;
                    }
                }
            }
        }
        let chol = cholesky(&sigma, dim)?;
        Ok(BlockPrior {
            dim,
            rho,
            feature_spans: feature_spans.to_vec(),
            sigma,
            chol,
        })
    }

    /// Prior over the assembled z: one correlated block per feature block,
    /// identity over the residual.
    pub fn for_latent(layout: &BlockLayout, rho: f64) -> Result<Self> {
        let spans: Vec<(usize, usize)> = (0..layout.num_layers())
            .map(|i| (layout.block_offset(i), layout.s_dims[i]))
            .collect();
        BlockPrior::new(layout.latent_dim(), &spans, rho)
    }

    /// Prior over one layer's z^i = (s^i; carrier): the feature block is
    /// correlated, the carrier identity.
    pub fn for_layer(layout: &BlockLayout, layer: usize, rho: f64) -> Result<Self> {
        BlockPrior::new(layout.layer_out_dim(layer), &[(0, layout.s_dims[layer])], rho)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn rho(&self) -> f64 {
        self.rho
    }

    pub fn feature_spans(&self) -> &[(usize, usize)] {
        &self.feature_spans
    }

    pub fn sigma(&self) -> &[f64] {
        &self.sigma
    }

    /// log N(x; 0, Σ) for one row.
    pub fn log_density(&self, x: &[f64]) -> f64 {
        let d = self.dim as f64;
        let quad = chol_quadform(&self.chol, self.dim, x);
        -0.5 * (d * (2.0 * std::f64::consts::PI).ln() + chol_logdet(&self.chol, self.dim) + quad)
    }
}

/// Closed-form KL(N(0,I) ∥ N(0,Σ)) = ½(tr Σ⁻¹ − d + ln det Σ).
pub fn kl_standard_to_block_prior(prior: &BlockPrior) -> f64 {
    let n = prior.dim;
    0.5 * (chol_trace_inverse(&prior.chol, n) - n as f64 + chol_logdet(&prior.chol, n))
}

/// Draw n samples z = L·ε with ε ~ N(0,I); deterministic in `seed`.
pub fn sample_prior(prior: &BlockPrior, n: usize, seed: u64) -> Array {
    let d = prior.dim;
    let mut rng = Stream::derive(seed, StreamKind::PriorSamples, 0);
    let mut eps = vec![0.0; d];
    let mut data = Vec::with_capacity(n * d);
    for _ in 0..n {
        for e in eps.iter_mut() {
            *e = rng.normal();
        }
        for i in 0..d {
            let mut v = 0.0;
            for j in 0..=i {
                v += prior.chol[i * d + j] * eps[j];
            }
            data.push(v);
        }
    }
    Array::new(vec![n, d], data).expect("sample shape")
}

/// Monte-Carlo estimate of KL(N(0,I) ∥ prior) by averaging the log-density
/// ratio over standard-normal draws (test oracle for the closed form).
pub fn mc_kl_standard_to_prior(prior: &BlockPrior, n: usize, seed: u64) -> f64 {
    let d = prior.dim;
    let mut rng = Stream::derive(seed, StreamKind::Metrics, 1);
    let mut z = vec![0.0; d];
    let log_norm = -0.5 * d as f64 * (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    for _ in 0..n {
        let mut sq = 0.0;
        for v in z.iter_mut() {
            *v = rng.normal();
            sq += *v * *v;
        }
        let log_std = log_norm - 0.5 * sq;
        total += log_std - prior.log_density(&z);
    }
    total / n as f64
}

/// Mean over the batch of ½ Σ_d (μ² + σ² − log σ² − 1), in nats.
pub fn kl_diag_gaussian_to_standard(mu: &Array, log_var: &Array) -> Result<f64> {
    if mu.shape() != log_var.shape() || mu.rank() != 2 {
        return Err(Error::Validation(format!(
            "kl needs matching [batch, d] arrays, got {:?} and {:?}",
            mu.shape(),
            log_var.shape()
        )));
    }
    let batch = mu.shape()[0] as f64;
    let total: f64 = mu
        .data()
        .iter()
        .zip(log_var.data())
        .map(|(&m, &lv)| m * m + lv.exp() - lv - 1.0)
        .sum();
    Ok(0.5 * total / batch)
}

/// Graph form of `kl_diag_gaussian_to_standard`.
pub fn kl_diag_nodes(g: &mut Graph, mu: NodeId, log_var: NodeId) -> Result<NodeId> {
    let mu2 = g.mul(mu, mu)?;
    let var = g.exp(log_var);
    let sum = g.add(mu2, var)?;
    let sum = g.sub(sum, log_var)?;
    let minus_one = g.scalar(-1.0);
    let term = g.add(sum, minus_one)?;
    let per_row = g.reduce_sum(term, Reduce::LastAxis)?;
    let mean = g.reduce_mean(per_row, Reduce::All)?;
    g.scale(mean, 0.5)
}

/// Eq. 7: KL(q(s^i)∥N(0,I)) + β · CE(C_i(s^i), y^i), all terms for the s part.
pub fn supervised_layer_loss(
    mu_s: &Array,
    log_var_s: &Array,
    s_sample: &Array,
    labels: &[usize],
    classifier: &Mlp,
    beta: f64,
) -> Result<f64> {
    let kl = kl_diag_gaussian_to_standard(mu_s, log_var_s)?;
    let ce = softmax_cross_entropy(&classifier.forward(s_sample)?, labels)?;
    Ok(kl + beta * ce)
}

/// Eq. 9: −H(y^i|h^i), the carrier's prediction entropy through the shared
/// classifier (negated so minimizing drives it toward uniform).
pub fn max_entropy_erasure(h: &Array, classifier: &Mlp, projection: &Mlp) -> Result<f64> {
    let logits = classifier.forward(&projection.forward(h)?)?;
    Ok(-predictive_entropy(&logits)?)
}

/// Graph form of the erasure term. Classifier and projection parameters are
/// frozen (stop-gradient), so only the encoder feels this term.
pub fn erasure_nodes(
    g: &mut Graph,
    h: NodeId,
    classifier: &Mlp,
    projection: &Mlp,
    cls_prefix: &str,
    proj_prefix: &str,
) -> Result<NodeId> {
    let projected = projection.nodes_opts(g, h, proj_prefix, true)?;
    let logits = classifier.nodes_opts(g, projected, cls_prefix, true)?;
    let ent = entropy_nodes(g, logits)?;
    Ok(g.neg(ent))
}

/// Probe loss training the projection to predict y^i from a detached h^i
/// through the frozen shared classifier (the adversarial side of erasure).
pub fn probe_nodes(
    g: &mut Graph,
    h: NodeId,
    classifier: &Mlp,
    projection: &Mlp,
    cls_prefix: &str,
    proj_prefix: &str,
    onehot: NodeId,
) -> Result<NodeId> {
    let h_detached = g.stop_gradient(h);
    let projected = projection.nodes_opts(g, h_detached, proj_prefix, false)?;
    let logits = classifier.nodes_opts(g, projected, cls_prefix, true)?;
    cross_entropy_from_onehot_nodes(g, logits, onehot)
}

/// Eq. 10 plus the reconstruction term: Σ_i [layer_loss_i + γ·erasure_i] + β·recon.
pub fn total_supervised_loss(
    layer_losses: &[f64],
    erasures: &[f64],
    recon: f64,
    weights: &LossWeights,
) -> f64 {
    let sum: f64 = layer_losses.iter().sum();
    let erasure: f64 = erasures.iter().sum();
    sum + weights.gamma * erasure + weights.beta * recon
}

/// Rows of `s` and `h` independently permuted, then concatenated — samples
/// from the product of marginals q(s)q(h).
pub fn permute_joint(s: &Array, h: &Array, seed: u64) -> Result<Array> {
    if s.rank() != 2 || h.rank() != 2 || s.shape()[0] != h.shape()[0] {
        return Err(Error::Validation(format!(
            "permute_joint needs matching [n, ·] arrays, got {:?} and {:?}",
            s.shape(),
            h.shape()
        )));
    }
    let n = s.shape()[0];
    if n < 2 {
        return Err(Error::Validation(format!(
            "permutation needs at least 2 rows, got {n}"
        )));
    }
    let perm_s = Stream::derive(seed, StreamKind::Permutation, 0).permutation(n);
    let perm_h = Stream::derive(seed, StreamKind::Permutation, 1).permutation(n);
    let (a, b) = (s.shape()[1], h.shape()[1]);
    let mut data = Vec::with_capacity(n * (a + b));
    for r in 0..n {
        data.extend_from_slice(s.row(perm_s[r]));
        data.extend_from_slice(h.row(perm_h[r]));
    }
    Array::new(vec![n, a + b], data)
}

/// Eq. 18: mean log(D(z)/(1−D(z))) for a sigmoid-head discriminator.
pub fn tc_estimate(discriminator: &Mlp, z: &Array) -> Result<f64> {
    let probs = discriminator.forward(z)?;
    if probs.shape()[1] != 1 {
        return Err(Error::Contract(format!(
            "tc_estimate needs a single-probability head, got width {}",
            probs.shape()[1]
        )));
    }
    tc_estimate_from_probs(probs.data())
}

/// Log-ratio average over explicit probabilities (oracle-injectable form).
pub fn tc_estimate_from_probs(probs: &[f64]) -> Result<f64> {
    let mut total = 0.0;
    for &p in probs {
        if !(0.0..=1.0).contains(&p) {
            return Err(Error::Contract(format!(
                "discriminator output {p} is not a probability"
            )));
        }
        let p = p.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total += (p / (1.0 - p)).ln();
    }
    Ok(total / probs.len() as f64)
}

/// Generator-side and discriminator-side losses for one layer's 3-class
/// discriminator over {posterior, prior, permuted}.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DiscriminatorLosses {
    /// 3-class cross-entropy (trains the discriminator).
    pub disc_loss: f64,
    /// mean(logit₀ − logit₁) on posterior samples ≈ KL(q(z^i) ∥ prior).
    pub gen_kl: f64,
    /// mean(logit₀ − logit₂) on posterior samples ≈ TC(s^i; h^i).
    pub gen_tc: f64,
}

pub fn discriminator_losses(
    discriminator: &Mlp,
    real_z: &Array,
    prior_samples: &Array,
    permuted_z: &Array,
) -> Result<DiscriminatorLosses> {
    for batch in [prior_samples, permuted_z] {
        if batch.shape()[1] != real_z.shape()[1] {
            return Err(Error::Validation(format!(
                "discriminator batches disagree on width: {:?} vs {:?}",
                real_z.shape(),
                batch.shape()
            )));
        }
    }
    let logits_real = discriminator.forward(real_z)?;
    if logits_real.shape()[1] != 3 {
        return Err(Error::Contract(format!(
            "3-class discriminator required, got {} outputs",
            logits_real.shape()[1]
        )));
    }
    let logits_prior = discriminator.forward(prior_samples)?;
    let logits_perm = discriminator.forward(permuted_z)?;

    let ce = |logits: &Array, class: usize| {
        softmax_cross_entropy(logits, &vec![class; logits.shape()[0]])
    };
    let disc_loss =
        (ce(&logits_real, 0)? + ce(&logits_prior, 1)? + ce(&logits_perm, 2)?) / 3.0;

    let n = logits_real.shape()[0] as f64;
    let mut gen_kl = 0.0;
    let mut gen_tc = 0.0;
    for r in 0..logits_real.shape()[0] {
        let row = logits_real.row(r);
        gen_kl += row[0] - row[1];
        gen_tc += row[0] - row[2];
    }
    Ok(DiscriminatorLosses {
        disc_loss,
        gen_kl: gen_kl / n,
        gen_tc: gen_tc / n,
    })
}

/// Graph form of the generator terms: (gen_kl, gen_tc) from posterior-sample
/// logits, with the discriminator frozen so gradients reach only the encoder.
pub fn generator_terms_nodes(
    g: &mut Graph,
    discriminator: &Mlp,
    real_z: NodeId,
    disc_prefix: &str,
) -> Result<(NodeId, NodeId)> {
    let logits = discriminator.nodes_opts(g, real_z, disc_prefix, true)?;
    let l0 = g.slice(logits, 0, 1)?;
    let l1 = g.slice(logits, 1, 1)?;
    let l2 = g.slice(logits, 2, 1)?;
    let kl_rows = g.sub(l0, l1)?;
    let tc_rows = g.sub(l0, l2)?;
    let gen_kl = g.reduce_mean(kl_rows, Reduce::All)?;
    let gen_tc = g.reduce_mean(tc_rows, Reduce::All)?;
    Ok((gen_kl, gen_tc))
}

/// Graph form of the discriminator's 3-class CE over three bound batches
/// (detached from the encoder: the batches enter as plain inputs).
pub fn discriminator_loss_nodes(
    g: &mut Graph,
    discriminator: &Mlp,
    real_z: NodeId,
    prior_z: NodeId,
    permuted_z: NodeId,
    disc_prefix: &str,
) -> Result<NodeId> {
    let mut parts = Vec::with_capacity(3);
    for (batch, class) in [(real_z, 0usize), (prior_z, 1), (permuted_z, 2)] {
        let logits = discriminator.nodes_opts(g, batch, disc_prefix, false)?;
        let n = g.shape(batch)[0];
        let labels = vec![class; n];
        let ce = crate::nn::cross_entropy_nodes(g, logits, &labels)?;
        parts.push(ce);
    }
    let sum01 = g.add(parts[0], parts[1])?;
    let sum = g.add(sum01, parts[2])?;
    g.scale(sum, 1.0 / 3.0)
}

/// Mean per-sample Bernoulli negative log-likelihood, x̂ clamped away from
/// {0,1}.
pub fn reconstruction_loss(x: &Array, x_hat: &Array) -> Result<f64> {
    if x.shape() != x_hat.shape() {
        return Err(Error::Validation(format!(
            "reconstruction shapes disagree: {:?} vs {:?}",
            x.shape(),
            x_hat.shape()
        )));
    }
    let batch = x.shape()[0] as f64;
    let mut total = 0.0;
    for (&xv, &hv) in x.data().iter().zip(x_hat.data()) {
        let h = hv.clamp(PROB_CLAMP, 1.0 - PROB_CLAMP);
        total -= xv * h.ln() + (1.0 - xv) * (1.0 - h).ln();
    }
    Ok(total / batch)
}

/// Graph form of `reconstruction_loss`.
pub fn reconstruction_nodes(g: &mut Graph, x: NodeId, x_hat: NodeId) -> Result<NodeId> {
    let clamped = g.clamp_unit(x_hat);
    let log_h = g.log(clamped);
    let one = g.scalar(1.0);
    let one_minus_x = g.sub(one, x)?;
    let one_minus_h = g.sub(one, clamped)?;
    let log_omh = g.log(one_minus_h);
    let pos = g.mul(x, log_h)?;
    let neg_term = g.mul(one_minus_x, log_omh)?;
    let ll = g.add(pos, neg_term)?;
    let nll = g.neg(ll);
    let per_row = g.reduce_sum(nll, Reduce::LastAxis)?;
    g.reduce_mean(per_row, Reduce::All)
}

/// Eq. 19 (as a minimization): Σ_i [gen_kl_i + γ·tc_i] + β·recon.
pub fn total_unsupervised_loss(
    gen_kls: &[f64],
    tcs: &[f64],
    recon: f64,
    weights: &LossWeights,
) -> f64 {
    let kl: f64 = gen_kls.iter().sum();
    let tc: f64 = tcs.iter().sum();
    kl + weights.gamma * tc + weights.beta * recon
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ndgrad::{finite_difference_check, Bindings};
    use crate::nn::{init_mlp, one_hot, Activation, MlpSpec};

    fn prior_2d(rho: f64) -> BlockPrior {
        BlockPrior::new(2, &[(0, 2)], rho).unwrap()
    }

    #[test]
    fn weights_validate() {
        assert!(LossWeights::new(10.0, 3.0).is_ok());
        assert!(LossWeights::new(-1.0, 0.0).is_err());
        assert!(LossWeights::new(f64::NAN, 0.0).is_err());
    }

    #[test]
    fn kl_diag_known_values() {
        let zero = Array::matrix(1, 1, vec![0.0]).unwrap();
        assert_eq!(
            kl_diag_gaussian_to_standard(&zero, &zero).unwrap(),
            0.0
        );
        let mu = Array::matrix(1, 1, vec![1.0]).unwrap();
        let kl = kl_diag_gaussian_to_standard(&mu, &zero).unwrap();
        assert!((kl - 0.5).abs() < 1e-12);

        let lv = Array::matrix(1, 1, vec![2.0f64.ln()]).unwrap();
        let kl = kl_diag_gaussian_to_standard(&zero, &lv).unwrap();
        let expect = 0.5 * (2.0 - 2.0f64.ln() - 1.0);
        assert!((kl - expect).abs() < 1e-12);
        assert!((kl - 0.1534).abs() < 1e-4);
    }

    #[test]
    fn kl_diag_nonnegative_on_random_inputs() {
        let mut rng = Stream::derive(2, StreamKind::Metrics, 0);
        for _ in 0..100 {
            let data_mu: Vec<f64> = (0..6).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
            let data_lv: Vec<f64> = (0..6).map(|_| rng.uniform_in(-2.0, 2.0)).collect();
            let mu = Array::matrix(2, 3, data_mu).unwrap();
            let lv = Array::matrix(2, 3, data_lv).unwrap();
            assert!(kl_diag_gaussian_to_standard(&mu, &lv).unwrap() >= -1e-10);
        }
    }

    #[test]
    fn kl_diag_graph_matches_and_differentiates() {
        let mu = Array::matrix(3, 2, vec![0.5, -0.2, 1.1, 0.0, -0.7, 0.3]).unwrap();
        let lv = Array::matrix(3, 2, vec![0.1, -0.4, 0.2, 0.9, -1.0, 0.05]).unwrap();
        let mut g = Graph::new();
        let m = g.input("mu", &[3, 2]).unwrap();
        let l = g.input("lv", &[3, 2]).unwrap();
        let kl = kl_diag_nodes(&mut g, m, l).unwrap();
        let mut b = Bindings::new();
        b.set("mu", mu.clone());
        b.set("lv", lv.clone());
        let eval = g.evaluate(&b).unwrap();
        let eager = kl_diag_gaussian_to_standard(&mu, &lv).unwrap();
        assert!((eval.scalar(kl).unwrap() - eager).abs() < 1e-12);
        let err = finite_difference_check(&g, kl, &b, &[("mu", m), ("lv", l)], 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn block_prior_closed_form_kl() {
        // ρ = 0 is the standard normal: zero KL.
        assert!(kl_standard_to_block_prior(&prior_2d(0.0)).abs() < 1e-12);

        // Single 2×2 block at ρ = 0.5: ½(8/3 − 2 + ln 0.75).
        let kl = kl_standard_to_block_prior(&prior_2d(0.5));
        let expect = 0.5 * (8.0 / 3.0 - 2.0 + 0.75f64.ln());
        assert!((kl - expect).abs() < 1e-12);
        assert!((kl - 0.18949).abs() < 1e-5);

        // Three independent blocks add.
        let p3 = BlockPrior::new(6, &[(0, 2), (2, 2), (4, 2)], 0.5).unwrap();
        let kl3 = kl_standard_to_block_prior(&p3);
        assert!((kl3 - 3.0 * expect).abs() < 1e-12);
        assert!((kl3 - 0.56847).abs() < 1e-4);

        assert!(BlockPrior::new(2, &[(0, 2)], 1.0).is_err());
        assert!(BlockPrior::new(2, &[(0, 3)], 0.5).is_err());
    }

    #[test]
    fn closed_form_matches_monte_carlo() {
        for rho in [0.0, 0.3, 0.5, 0.8] {
            let prior = prior_2d(rho);
            let exact = kl_standard_to_block_prior(&prior);
            let mc = mc_kl_standard_to_prior(&prior, 1_000_000, 42);
            assert!(
                (exact - mc).abs() < 0.005,
                "rho={rho}: exact {exact} vs mc {mc}"
            );
        }
    }

    #[test]
    fn prior_samples_have_requested_correlation() {
        let prior = prior_2d(0.5);
        let a = sample_prior(&prior, 100_000, 9);
        let b = sample_prior(&prior, 100_000, 9);
        assert_eq!(a.data(), b.data());

        let corr = empirical_corr(&a, 0, 1);
        assert!((corr - 0.5).abs() < 0.01, "corr {corr}");

        let indep = BlockPrior::new(2, &[(0, 2)], 0.0).unwrap();
        let c = sample_prior(&indep, 100_000, 9);
        let corr0 = empirical_corr(&c, 0, 1);
        assert!(corr0.abs() < 0.01, "corr {corr0}");
    }

    fn empirical_corr(z: &Array, i: usize, j: usize) -> f64 {
        let n = z.shape()[0] as f64;
        let d = z.shape()[1];
        let (mut mi, mut mj) = (0.0, 0.0);
        for r in 0..z.shape()[0] {
            mi += z.data()[r * d + i];
            mj += z.data()[r * d + j];
        }
        mi /= n;
        mj /= n;
        let (mut sij, mut sii, mut sjj) = (0.0, 0.0, 0.0);
        for r in 0..z.shape()[0] {
            let a = z.data()[r * d + i] - mi;
            let b = z.data()[r * d + j] - mj;
            sij += a * b;
            sii += a * a;
            sjj += b * b;
        }
        sij / (sii.sqrt() * sjj.sqrt())
    }

    #[test]
    fn supervised_layer_loss_composes() {
        let batch = 4;
        let mu = Array::zeros(&[batch, 2]);
        let lv = Array::zeros(&[batch, 2]);
        let s = Array::zeros(&[batch, 2]);
        let labels = vec![0, 1, 2, 0];
        // Zero-initialized classifier emits uniform logits.
        let spec = MlpSpec::new(vec![2, 3], Activation::Relu, Activation::Identity).unwrap();
        let mut cls = init_mlp(&spec, 1).unwrap();
        for w in cls.layers[0].weight.data_mut() {
            *w = 0.0;
        }

        let loss = supervised_layer_loss(&mu, &lv, &s, &labels, &cls, 10.0).unwrap();
        assert!((loss - 10.0 * 3.0f64.ln()).abs() < 1e-12);
        assert!((loss - 10.986).abs() < 1e-3);

        let kl_only = supervised_layer_loss(&mu, &lv, &s, &labels, &cls, 0.0).unwrap();
        assert_eq!(kl_only, 0.0);
    }

    #[test]
    fn erasure_range_and_uniform_minimum() {
        let spec = MlpSpec::new(vec![2, 3], Activation::Relu, Activation::Identity).unwrap();
        let mut cls = init_mlp(&spec, 2).unwrap();
        let proj_spec = MlpSpec::new(vec![4, 2], Activation::Relu, Activation::Identity).unwrap();
        let proj = init_mlp(&proj_spec, 3).unwrap();
        let h = Array::new(vec![5, 4], (0..20).map(|i| i as f64 / 10.0).collect()).unwrap();

        let e = max_entropy_erasure(&h, &cls, &proj).unwrap();
        assert!(e <= 0.0 && e >= -(3.0f64.ln()) - 1e-12);

        for w in cls.layers[0].weight.data_mut() {
            *w = 0.0;
        }
        let e_uniform = max_entropy_erasure(&h, &cls, &proj).unwrap();
        assert!((e_uniform + 3.0f64.ln()).abs() < 1e-12);
        assert!((e_uniform + 1.0986).abs() < 1e-4);
    }

    #[test]
    fn erasure_gradient_stops_at_classifier_and_projection() {
        let spec = MlpSpec::new(vec![2, 3], Activation::Relu, Activation::Identity).unwrap();
        let cls = init_mlp(&spec, 4).unwrap();
        let proj_spec = MlpSpec::new(vec![4, 2], Activation::Relu, Activation::Identity).unwrap();
        let proj = init_mlp(&proj_spec, 5).unwrap();

        let mut g = Graph::new();
        let h = g.input("h", &[3, 4]).unwrap();
        let erasure = erasure_nodes(&mut g, h, &cls, &proj, "cls", "proj").unwrap();

        let mut b = Bindings::new();
        b.set(
            "h",
            Array::new(vec![3, 4], (0..12).map(|i| (i as f64) / 5.0 - 1.0).collect()).unwrap(),
        );
        cls.bind(&mut b, "cls");
        proj.bind(&mut b, "proj");
        let eval = g.evaluate(&b).unwrap();

        let cls_w = g.input_id("cls.0.w").unwrap();
        let proj_w = g.input_id("proj.0.w").unwrap();
        let grads = g.gradients(&eval, erasure, &[cls_w, proj_w, h]).unwrap();
        assert!(grads[&cls_w].data().iter().all(|&v| v == 0.0));
        assert!(grads[&proj_w].data().iter().all(|&v| v == 0.0));
        assert!(grads[&h].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn probe_trains_projection_but_not_classifier_or_encoder() {
        let spec = MlpSpec::new(vec![2, 3], Activation::Relu, Activation::Identity).unwrap();
        let cls = init_mlp(&spec, 4).unwrap();
        let proj_spec = MlpSpec::new(vec![4, 2], Activation::Relu, Activation::Identity).unwrap();
        let proj = init_mlp(&proj_spec, 5).unwrap();

        let mut g = Graph::new();
        let h = g.input("h", &[3, 4]).unwrap();
        let onehot = g.constant(one_hot(&[0, 1, 2], 3));
        let probe = probe_nodes(&mut g, h, &cls, &proj, "cls", "proj", onehot).unwrap();

        let mut b = Bindings::new();
        b.set(
            "h",
            Array::new(vec![3, 4], (0..12).map(|i| (i as f64) / 3.0 - 2.0).collect()).unwrap(),
        );
        cls.bind(&mut b, "cls");
        proj.bind(&mut b, "proj");
        let eval = g.evaluate(&b).unwrap();

        let cls_w = g.input_id("cls.0.w").unwrap();
        let proj_w = g.input_id("proj.0.w").unwrap();
        let grads = g.gradients(&eval, probe, &[cls_w, proj_w, h]).unwrap();
        assert!(grads[&cls_w].data().iter().all(|&v| v == 0.0));
        assert!(grads[&proj_w].data().iter().any(|&v| v != 0.0));
        assert!(grads[&h].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn permute_joint_preserves_marginals_and_breaks_pairing() {
        let n = 10_000;
        let prior = prior_2d(0.5);
        let z = sample_prior(&prior, n, 3);
        let s = Array::new(
            vec![n, 1],
            (0..n).map(|r| z.data()[r * 2]).collect(),
        )
        .unwrap();
        let h = Array::new(
            vec![n, 1],
            (0..n).map(|r| z.data()[r * 2 + 1]).collect(),
        )
        .unwrap();

        let permuted = permute_joint(&s, &h, 17).unwrap();
        assert_eq!(permuted.shape(), &[n, 2]);

        let mut before: Vec<f64> = s.data().to_vec();
        let mut after: Vec<f64> = (0..n).map(|r| permuted.data()[r * 2]).collect();
        before.sort_by(f64::total_cmp);
        after.sort_by(f64::total_cmp);
        assert_eq!(before, after);

        let corr_before = empirical_corr(&z, 0, 1);
        let corr_after = empirical_corr(&permuted, 0, 1);
        assert!(corr_before > 0.45);
        assert!(corr_after.abs() < 0.03, "corr {corr_after}");

        let tiny = Array::matrix(1, 1, vec![0.0]).unwrap();
        assert!(permute_joint(&tiny, &tiny, 0).is_err());
    }

    #[test]
    fn permute_joint_two_rows() {
        // With n = 2 each marginal is kept or swapped; whatever the draw,
        // row multisets per column survive.
        let s = Array::matrix(2, 1, vec![1.0, 2.0]).unwrap();
        let h = Array::matrix(2, 1, vec![10.0, 20.0]).unwrap();
        let p = permute_joint(&s, &h, 5).unwrap();
        let mut col_s = vec![p.data()[0], p.data()[2]];
        let mut col_h = vec![p.data()[1], p.data()[3]];
        col_s.sort_by(f64::total_cmp);
        col_h.sort_by(f64::total_cmp);
        assert_eq!(col_s, vec![1.0, 2.0]);
        assert_eq!(col_h, vec![10.0, 20.0]);
    }

    #[test]
    fn tc_estimate_constants() {
        assert_eq!(tc_estimate_from_probs(&[0.5; 10]).unwrap(), 0.0);
        let p = 1.0 / (1.0 + (-1.0f64).exp());
        let tc = tc_estimate_from_probs(&vec![p; 7]).unwrap();
        assert!((tc - 1.0).abs() < 1e-12);
        assert!(tc_estimate_from_probs(&[1.5]).is_err());
        assert!(tc_estimate_from_probs(&[-0.1]).is_err());
    }

    #[test]
    fn tc_estimate_with_analytic_optimal_discriminator() {
        // For bivariate ρ=0.5, the optimal D's log-ratio is the density
        // ratio between the joint and the product of marginals; its average
        // under the joint is exactly the MI −½·ln(1−ρ²).
        let rho: f64 = 0.5;
        let prior = prior_2d(rho);
        let n = 100_000;
        let z = sample_prior(&prior, n, 21);
        let indep = BlockPrior::new(2, &[(0, 2)], 0.0).unwrap();
        let probs: Vec<f64> = (0..n)
            .map(|r| {
                let row = &z.data()[r * 2..r * 2 + 2];
                let log_ratio = prior.log_density(row) - indep.log_density(row);
                1.0 / (1.0 + (-log_ratio).exp())
            })
            .collect();
        let tc = tc_estimate_from_probs(&probs).unwrap();
        let mi = -0.5 * (1.0 - rho * rho).ln();
        assert!((mi - 0.14384).abs() < 1e-5);
        assert!(
            (tc - mi).abs() < 0.05 * mi,
            "tc {tc} vs analytic mi {mi}"
        );
    }

    #[test]
    fn uniform_discriminator_gives_ln3_and_zero_gen_terms() {
        let spec = MlpSpec::new(vec![4, 8, 3], Activation::Relu, Activation::Identity).unwrap();
        let mut disc = init_mlp(&spec, 6).unwrap();
        // Zero the head so every class logit is identical.
        for w in disc.layers[1].weight.data_mut() {
            *w = 0.0;
        }
        let z = Array::new(vec![10, 4], (0..40).map(|i| i as f64 / 40.0).collect()).unwrap();
        let losses = discriminator_losses(&disc, &z, &z, &z).unwrap();
        assert!((losses.disc_loss - 3.0f64.ln()).abs() < 1e-12);
        assert_eq!(losses.gen_kl, 0.0);
        assert_eq!(losses.gen_tc, 0.0);
    }

    #[test]
    fn generator_terms_freeze_discriminator() {
        let spec = MlpSpec::new(vec![3, 6, 3], Activation::Relu, Activation::Identity).unwrap();
        let disc = init_mlp(&spec, 8).unwrap();
        let mut g = Graph::new();
        let z = g.input("z", &[4, 3]).unwrap();
        let (gen_kl, _gen_tc) = generator_terms_nodes(&mut g, &disc, z, "disc").unwrap();

        let mut b = Bindings::new();
        b.set(
            "z",
            Array::new(vec![4, 3], (0..12).map(|i| (i as f64) / 6.0 - 1.0).collect()).unwrap(),
        );
        disc.bind(&mut b, "disc");
        let eval = g.evaluate(&b).unwrap();
        let disc_w = g.input_id("disc.0.w").unwrap();
        let grads = g.gradients(&eval, gen_kl, &[disc_w, z]).unwrap();
        assert!(grads[&disc_w].data().iter().all(|&v| v == 0.0));
        assert!(grads[&z].data().iter().any(|&v| v != 0.0));
    }

    #[test]
    fn reconstruction_known_values() {
        let x = Array::matrix(1, 4, vec![0.0, 1.0, 1.0, 0.0]).unwrap();
        let perfect = reconstruction_loss(&x, &x).unwrap();
        assert!(perfect < 1e-5, "clamped perfect loss {perfect}");

        let half = Array::matrix(1, 4, vec![0.5; 4]).unwrap();
        let loss = reconstruction_loss(&x, &half).unwrap();
        assert!((loss - 4.0 * 2.0f64.ln()).abs() < 1e-12);

        let one = Array::matrix(1, 1, vec![1.0]).unwrap();
        let nine = Array::matrix(1, 1, vec![0.9]).unwrap();
        let loss = reconstruction_loss(&one, &nine).unwrap();
        assert!((loss + 0.9f64.ln()).abs() < 1e-12);
        assert!((loss - 0.1054).abs() < 1e-4);
    }

    #[test]
    fn reconstruction_graph_matches_and_differentiates() {
        let x = Array::matrix(2, 3, vec![0.0, 1.0, 0.5, 1.0, 0.25, 0.75]).unwrap();
        let xh = Array::matrix(2, 3, vec![0.2, 0.8, 0.4, 0.95, 0.3, 0.6]).unwrap();
        let mut g = Graph::new();
        let xn = g.input("x", &[2, 3]).unwrap();
        let hn = g.input("xh", &[2, 3]).unwrap();
        let loss = reconstruction_nodes(&mut g, xn, hn).unwrap();
        let mut b = Bindings::new();
        b.set("x", x.clone());
        b.set("xh", xh.clone());
        let eval = g.evaluate(&b).unwrap();
        let eager = reconstruction_loss(&x, &xh).unwrap();
        assert!((eval.scalar(loss).unwrap() - eager).abs() < 1e-12);
        let err = finite_difference_check(&g, loss, &b, &[("xh", hn)], 1e-5).unwrap();
        assert!(err < 1e-6, "relative error {err}");
    }

    #[test]
    fn totals_are_weighted_sums() {
        let w = LossWeights::new(10.0, 3.0).unwrap();
        let total = total_unsupervised_loss(&[0.03, 0.02], &[0.004, 0.006], 0.2, &w);
        assert!((total - 2.08).abs() < 1e-12);

        let w0 = LossWeights::new(0.0, 0.0).unwrap();
        let sup = total_supervised_loss(&[1.5, 2.5], &[9.0, 9.0], 7.0, &w0);
        assert_eq!(sup, 4.0);

        let w3 = LossWeights::new(0.0, 3.0).unwrap();
        let v = 1.25;
        let e = -0.5;
        let sup = total_supervised_loss(&[v, v, v], &[e, e, e], 0.0, &w3);
        assert!((sup - 3.0 * (v + 3.0 * e)).abs() < 1e-12);
    }
}
