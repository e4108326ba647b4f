//! Parameter registration and forward evaluation of the building blocks.

use dewm_autograd::ops::norm::BatchStats;
use dewm_autograd::{Real, Tensor, Var};
use rand::Rng;

use super::session::{Mode, Session};
use crate::error::Result;
use crate::params::{kaiming, ParamKind, ParamStore};

const BN_EPS: f64 = 1e-5;
/// Squeeze-and-excitation reduction ratio.
pub const SE_REDUCTION: usize = 8;

pub fn init_conv<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cout: usize,
    cin: usize,
    k: usize,
    bias: bool,
    rng: &mut impl Rng,
) {
    store.insert(
        format!("{prefix}.weight"),
        kaiming(&[cout, cin, k, k], cin * k * k, rng),
        ParamKind::Trainable,
    );
    if bias {
        store.insert(format!("{prefix}.bias"), Tensor::zeros(&[cout]), ParamKind::Trainable);
    }
}

pub fn init_bn<T: Real>(store: &mut ParamStore<T>, prefix: &str, ch: usize) {
    store.insert(format!("{prefix}.gamma"), Tensor::full(&[ch], T::one()), ParamKind::Trainable);
    store.insert(format!("{prefix}.beta"), Tensor::zeros(&[ch]), ParamKind::Trainable);
    store.insert(format!("{prefix}.running_mean"), Tensor::zeros(&[ch]), ParamKind::Buffer);
    store.insert(format!("{prefix}.running_var"), Tensor::full(&[ch], T::one()), ParamKind::Buffer);
}

pub fn init_linear<T: Real>(store: &mut ParamStore<T>, prefix: &str, out: usize, inp: usize, rng: &mut impl Rng) {
    store.insert(format!("{prefix}.weight"), kaiming(&[out, inp], inp, rng), ParamKind::Trainable);
    store.insert(format!("{prefix}.bias"), Tensor::zeros(&[out]), ParamKind::Trainable);
}

/// 3x3 (or `k x k`) convolution without bias followed by batch norm.
pub fn init_conv_bn_relu<T: Real>(
    store: &mut ParamStore<T>,
    prefix: &str,
    cin: usize,
    cout: usize,
    k: usize,
    rng: &mut impl Rng,
) {
    init_conv(store, &format!("{prefix}.conv"), cout, cin, k, false, rng);
    init_bn(store, &format!("{prefix}.bn"), cout);
}

/// Conv-BN-ReLU followed by a squeeze-and-excitation gate.
pub fn init_se_block<T: Real>(store: &mut ParamStore<T>, prefix: &str, ch: usize, rng: &mut impl Rng) {
    init_conv_bn_relu(store, prefix, ch, ch, 3, rng);
    let squeezed = (ch / SE_REDUCTION).max(1);
    init_linear(store, &format!("{prefix}.se.fc1"), squeezed, ch, rng);
    init_linear(store, &format!("{prefix}.se.fc2"), ch, squeezed, rng);
}

pub fn conv<T: Real>(sess: &mut Session<'_, T>, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let w = sess.param(&format!("{prefix}.weight"))?;
    let bias_name = format!("{prefix}.bias");
    let b = if sess.has_param(&bias_name) {
        Some(sess.param(&bias_name)?)
    } else {
        None
    };
    let k = sess.tape.shape(w)[2];
    Ok(sess.tape.conv2d(x, w, b, stride, k / 2)?)
}

pub fn batch_norm<T: Real>(sess: &mut Session<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let gamma = sess.param(&format!("{prefix}.gamma"))?;
    let beta = sess.param(&format!("{prefix}.beta"))?;
    let eps = T::from_f64(BN_EPS);
    match sess.mode() {
        Mode::Train => {
            let (y, stats) = sess.tape.batch_norm(x, gamma, beta, BatchStats::Batch, eps)?;
            if let Some((mean, var)) = stats {
                sess.record_running(prefix, mean, var);
            }
            Ok(y)
        }
        Mode::Eval => {
            let store = sess.store();
            let mean = store.get(&format!("{prefix}.running_mean"))?.data();
            let var = store.get(&format!("{prefix}.running_var"))?.data();
            let (y, _) = sess.tape.batch_norm(x, gamma, beta, BatchStats::Running { mean, var }, eps)?;
            Ok(y)
        }
    }
}

pub fn linear<T: Real>(sess: &mut Session<'_, T>, prefix: &str, x: Var) -> Result<Var> {
    let w = sess.param(&format!("{prefix}.weight"))?;
    let b = sess.param(&format!("{prefix}.bias"))?;
    Ok(sess.tape.linear(x, w, Some(b))?)
}

pub fn conv_bn_relu<T: Real>(sess: &mut Session<'_, T>, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv(sess, &format!("{prefix}.conv"), x, stride)?;
    let y = batch_norm(sess, &format!("{prefix}.bn"), y)?;
    Ok(sess.tape.relu(y))
}

pub fn se_block<T: Real>(sess: &mut Session<'_, T>, prefix: &str, x: Var, stride: usize) -> Result<Var> {
    let y = conv_bn_relu(sess, prefix, x, stride)?;
    let squeeze = sess.tape.global_avg_pool(y)?;
    let s = linear(sess, &format!("{prefix}.se.fc1"), squeeze)?;
    let s = sess.tape.relu(s);
    let s = linear(sess, &format!("{prefix}.se.fc2"), s)?;
    let gate = sess.tape.sigmoid(s);
    Ok(sess.tape.channel_scale(y, gate)?)
}
