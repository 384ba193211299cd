//! Loss functions: triplet ranking with adaptive margin, GAN cross-entropy
//! terms, the three-part generator objective, and the descriptor distance.

use crate::taxonomy::{TaxonomyError, TaxonomyTree};
use crate::tensor::{Scalar, Tape, Tensor, Var};

/// Probabilities are clamped to this range before any log.
pub const PROB_CLAMP: f64 = 1e-6;

/// Variance floor inside the ZNCC standard deviations.
pub const ZNCC_VAR_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LossWeights {
    pub lambda_reg: f32,
    pub lambda_emb: f32,
    pub alpha_min: f32,
    pub alpha_max: f32,
    /// Margin used when the taxonomy is disabled.
    pub fixed_alpha: f32,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda_reg: 1.0,
            lambda_emb: 0.1,
            alpha_min: 0.05,
            alpha_max: 0.5,
            fixed_alpha: 0.3,
        }
    }
}

fn assert_unit_rows<F: Scalar>(tape: &Tape<F>, v: Var, what: &str) {
    tape.with_value(v, |t| {
        assert_eq!(t.shape().len(), 2, "{}: descriptors must be rank 2", what);
        let d = t.shape()[1];
        for (i, row) in t.data().chunks(d).enumerate() {
            let norm = row.iter().map(|&x| x * x).sum::<F>().sqrt().to_f64();
            assert!(
                (norm - 1.0).abs() < 1e-4,
                "{}: row {} has norm {}, expected unit",
                what,
                i,
                norm
            );
        }
    });
}

/// One minus the cosine similarity, per row of two (n, d) unit-descriptor
/// batches. Returns an (n) vector of distances in [0, 2].
pub fn cosine_distance<F: Scalar>(tape: &Tape<F>, x: Var, y: Var) -> Var {
    assert_unit_rows(tape, x, "cosine_distance lhs");
    assert_unit_rows(tape, y, "cosine_distance rhs");
    let dot = tape.sum_rows(tape.mul(x, y));
    tape.add_scalar(tape.scale(dot, -F::one()), F::one())
}

/// Scalar cosine distance between two unit vectors.
pub fn cosine_distance_flat(x: &[f32], y: &[f32]) -> f32 {
    assert_eq!(x.len(), y.len());
    1.0 - x.iter().zip(y).map(|(a, b)| a * b).sum::<f32>()
}

/// Triplet ranking loss, hinged per triplet then averaged over the batch:
/// mean(max(0, d(a,p) - d(a,n) + alpha)).
pub fn triplet_loss<F: Scalar>(tape: &Tape<F>, e_a: Var, e_p: Var, e_n: Var, alpha: Var) -> Var {
    let d_ap = cosine_distance(tape, e_a, e_p);
    let d_an = cosine_distance(tape, e_a, e_n);
    let margin = tape.add(tape.sub(d_ap, d_an), alpha);
    tape.mean(tape.relu(margin))
}

/// Binary cross entropy over real and fake probability grids, averaged over
/// all patch positions: -mean(log d_real) - mean(log(1 - d_fake)).
pub fn discriminator_loss<F: Scalar>(tape: &Tape<F>, d_real: Var, d_fake: Var) -> Var {
    let lo = F::from_f64(PROB_CLAMP);
    let hi = F::from_f64(1.0 - PROB_CLAMP);
    let real = tape.clamp(d_real, lo, hi);
    let fake = tape.clamp(d_fake, lo, hi);
    let real_term = tape.mean(tape.log(real));
    let one_minus_fake = tape.add_scalar(tape.scale(fake, -F::one()), F::one());
    let fake_term = tape.mean(tape.log(one_minus_fake));
    tape.scale(tape.add(real_term, fake_term), -F::one())
}

/// The three generator terms plus their weighted total.
pub struct GeneratorLoss {
    pub total: Var,
    pub adv: Var,
    pub reg: Var,
    pub emb: Var,
}

/// Generator objective: L_adv + lambda_reg * L_reg + lambda_emb * L_emb with
/// L_adv = -mean(log d_fake), L_reg = -zncc(i_p, g_out) and
/// L_emb = -mean(cosine_distance(e_p, e_g)). `e_p` is detached here, so this
/// loss never moves the encoder.
pub fn generator_loss<F: Scalar>(
    tape: &Tape<F>,
    d_fake: Var,
    i_p: Var,
    g_out: Var,
    e_p: Var,
    e_g: Var,
    w: &LossWeights,
) -> GeneratorLoss {
    let lo = F::from_f64(PROB_CLAMP);
    let hi = F::from_f64(1.0 - PROB_CLAMP);
    let fake = tape.clamp(d_fake, lo, hi);
    let adv = tape.scale(tape.mean(tape.log(fake)), -F::one());
    let reg = tape.scale(tape.zncc(i_p, g_out), -F::one());
    let e_p_const = tape.stop_gradient(e_p);
    let emb = tape.scale(tape.mean(cosine_distance(tape, e_p_const, e_g)), -F::one());
    let total = tape.add(
        adv,
        tape.add(
            tape.scale(reg, F::from_f64(w.lambda_reg as f64)),
            tape.scale(emb, F::from_f64(w.lambda_emb as f64)),
        ),
    );
    GeneratorLoss { total, adv, reg, emb }
}

/// Per-triplet margins for a batch of (anchor class, negative class) pairs.
/// With `hierarchical` unset every margin is the fixed one.
pub fn batch_margins(
    tree: &TaxonomyTree,
    classes: &[(String, String)],
    w: &LossWeights,
    hierarchical: bool,
) -> Result<Vec<f32>, TaxonomyError> {
    classes
        .iter()
        .map(|(a, n)| {
            if hierarchical {
                tree.hierarchical_margin(a, n, w.alpha_min, w.alpha_max)
            } else {
                Ok(w.fixed_alpha)
            }
        })
        .collect()
}

/// Encoder objective: triplet loss with per-triplet margins supplied as data.
pub fn encoder_loss<F: Scalar>(
    tape: &Tape<F>,
    e_a: Var,
    e_p: Var,
    e_n: Var,
    margins: &[f32],
) -> Var {
    let n = tape.shape_of(e_a)[0];
    assert_eq!(margins.len(), n, "one margin per triplet");
    let alpha = tape.constant(Tensor::new(
        vec![n],
        margins.iter().map(|&a| F::from_f64(a as f64)).collect(),
    ));
    triplet_loss(tape, e_a, e_p, e_n, alpha)
}
