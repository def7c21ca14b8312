//! In-batch softmax cross-entropy over user/item representation pairs.

use crate::error::{Error, Result};
use crate::numerics::matrix::Matrix;
use crate::numerics::scalar::Scalar;

/// Output of [`in_batch_softmax_loss`].
#[derive(Debug, Clone)]
pub struct InBatchLoss<S: Scalar = f32> {
    /// Mean negative log-likelihood of the diagonal.
    pub loss: S,
    /// `dL/d user_reps`, shape `B x d`.
    pub d_users: Matrix<S>,
    /// `dL/d item_reps`, shape `B x d`.
    pub d_items: Matrix<S>,
    /// Row-softmax probabilities, shape `B x B` (diagnostics and tests).
    pub probs: Matrix<S>,
}

/// Contrastive loss over a batch of `B` (user, item) representation pairs.
///
/// Row `i` of `user_reps` is scored against every row of `item_reps`; the
/// matching item `i` is the positive, the other `B - 1` rows act as
/// in-batch negatives:
///
/// ```text
/// z[i][j] = (user[i] . item[j]) / temperature
/// loss    = -(1/B) * sum_i log softmax(z[i])[i]
/// ```
///
/// Softmax rows are max-shifted and evaluated entirely in `f64`, so scaling
/// all logits of a row by a shared shift cannot change the probabilities.
/// Requires `B >= 2` (a single pair has no negatives) and finite inputs.
pub fn in_batch_softmax_loss<S: Scalar>(
    user_reps: &Matrix<S>,
    item_reps: &Matrix<S>,
    temperature: f64,
) -> Result<InBatchLoss<S>> {
    if user_reps.shape() != item_reps.shape() {
        return Err(Error::shape(
            "in_batch_softmax_loss",
            format!("{}x{}", user_reps.rows(), user_reps.cols()),
            format!("{}x{}", item_reps.rows(), item_reps.cols()),
        ));
    }
    let b = user_reps.rows();
    if b < 2 {
        return Err(Error::Config(format!(
            "in-batch softmax needs a batch of at least 2, got {b}"
        )));
    }
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::Config(format!(
            "softmax temperature must be positive and finite, got {temperature}"
        )));
    }
    user_reps.ensure_finite("user representations")?;
    item_reps.ensure_finite("item representations")?;

    // Logits in f64: z = (U V^T) / temperature.
    let mut logits = vec![0f64; b * b];
    for i in 0..b {
        let u = user_reps.row(i);
        for j in 0..b {
            let v = item_reps.row(j);
            let mut acc = 0f64;
            for (&a, &c) in u.iter().zip(v.iter()) {
                acc += a.to_f64() * c.to_f64();
            }
            logits[i * b + j] = acc / temperature;
        }
    }

    // Row softmax with max shift, all in f64.
    let mut probs = Matrix::<S>::zeros(b, b);
    let mut probs_f64 = vec![0f64; b * b];
    let mut loss_acc = 0f64;
    for i in 0..b {
        let row = &logits[i * b..(i + 1) * b];
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut denom = 0f64;
        for (j, &z) in row.iter().enumerate() {
            let e = (z - max).exp();
            probs_f64[i * b + j] = e;
            denom += e;
        }
        for j in 0..b {
            let p = probs_f64[i * b + j] / denom;
            probs_f64[i * b + j] = p;
            probs.set(i, j, S::from_f64(p));
        }
        // log softmax of the diagonal, computed from the shifted logits to
        // avoid taking log of a rounded probability.
        loss_acc += -(row[i] - max - denom.ln());
    }
    let loss = loss_acc / b as f64;
    if !loss.is_finite() {
        return Err(Error::NonFinite("in-batch softmax loss".to_string()));
    }

    // dL/dZ = (P - I) / B; chain through Z = U V^T / temperature.
    let mut dz = Matrix::<S>::zeros(b, b);
    let scale = 1.0 / (b as f64 * temperature);
    for i in 0..b {
        for j in 0..b {
            let indicator = if i == j { 1.0 } else { 0.0 };
            dz.set(i, j, S::from_f64((probs_f64[i * b + j] - indicator) * scale));
        }
    }
    let d_users = dz.matmul(item_reps)?;
    let d_items = dz.matmul_at_b(user_reps)?;

    Ok(InBatchLoss {
        loss: S::from_f64(loss),
        d_users,
        d_items,
        probs,
    })
}
