//! Loss functions, both as plain numbers and as tape graphs.

use dewm_autograd::{Real, Tape, Var};

use crate::error::{Error, Result};
use crate::types::{ImageArray, WatermarkMessage};

/// Probabilities are clamped into `[EPS, 1 - EPS]` before taking logs.
pub const PROB_EPS: f64 = 1e-7;

/// Mean squared error between message bits and decoder outputs.
pub fn loss_decoder(message: &WatermarkMessage, logits: &[f64]) -> Result<f64> {
    if message.len() != logits.len() {
        return Err(Error::MessageLength {
            expected: message.len(),
            actual: logits.len(),
        });
    }
    let sum: f64 = message
        .bits()
        .iter()
        .zip(logits)
        .map(|(&b, &z)| (b as f64 - z).powi(2))
        .sum();
    Ok(sum / logits.len() as f64)
}

/// Mean squared error between host and watermarked image.
pub fn loss_encoder(host: &ImageArray, watermarked: &ImageArray) -> Result<f64> {
    if host.dims() != watermarked.dims() {
        return Err(Error::shape(format!("{:?} vs {:?}", host.dims(), watermarked.dims())));
    }
    let sum: f64 = host
        .data()
        .iter()
        .zip(watermarked.data())
        .map(|(&a, &b)| (a as f64 - b as f64).powi(2))
        .sum();
    Ok(sum / host.data().len() as f64)
}

fn clamp_prob(p: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Shape(format!("probability {p} outside [0,1]")));
    }
    Ok(p.clamp(PROB_EPS, 1.0 - PROB_EPS))
}

/// Generator adversarial loss for a discriminator that outputs the
/// probability of "watermarked". Standard form: `-ln(1 - p_em)`; printed
/// form: `ln(p_em)`.
pub fn loss_adversarial(p_em: f64, paper_literal: bool) -> Result<f64> {
    let p = clamp_prob(p_em)?;
    Ok(if paper_literal { p.ln() } else { -(1.0 - p).ln() })
}

/// Discriminator loss. Standard form: `-ln(p_em) - ln(1 - p_host)`; printed
/// form: `ln(1 - p_em)` (no host term).
pub fn loss_discriminator(p_em: f64, p_host: f64, paper_literal: bool) -> Result<f64> {
    let pe = clamp_prob(p_em)?;
    let ph = clamp_prob(p_host)?;
    Ok(if paper_literal {
        (1.0 - pe).ln()
    } else {
        -pe.ln() - (1.0 - ph).ln()
    })
}

fn clamped_prob<T: Real>(tape: &mut Tape<T>, logits: Var) -> Var {
    let p = tape.sigmoid(logits);
    tape.clamp(p, T::from_f64(PROB_EPS), T::from_f64(1.0 - PROB_EPS))
}

/// `mean(ln(p))` when `complement` is false, `mean(ln(1 - p))` otherwise.
fn mean_log<T: Real>(tape: &mut Tape<T>, p: Var, complement: bool) -> Var {
    let q = if complement {
        let neg = tape.scale(p, -T::one());
        tape.add_scalar(neg, T::one())
    } else {
        p
    };
    let l = tape.ln(q);
    tape.mean(l)
}

/// Batch-mean generator adversarial loss from `N x 1` discriminator logits.
pub fn adversarial_graph<T: Real>(tape: &mut Tape<T>, logits_em: Var, paper_literal: bool) -> Var {
    let p = clamped_prob(tape, logits_em);
    if paper_literal {
        mean_log(tape, p, false)
    } else {
        let l = mean_log(tape, p, true);
        tape.scale(l, -T::one())
    }
}

/// Batch-mean discriminator loss from logits on watermarked and host images.
pub fn discriminator_graph_loss<T: Real>(
    tape: &mut Tape<T>,
    logits_em: Var,
    logits_host: Var,
    paper_literal: bool,
) -> Result<Var> {
    let pe = clamped_prob(tape, logits_em);
    if paper_literal {
        return Ok(mean_log(tape, pe, true));
    }
    let ph = clamped_prob(tape, logits_host);
    let a = mean_log(tape, pe, false);
    let b = mean_log(tape, ph, true);
    let s = tape.add(a, b)?;
    Ok(tape.scale(s, -T::one()))
}
