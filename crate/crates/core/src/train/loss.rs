use crate::autodiff::{Graph, Real, Triple, Var};
use crate::error::{Error, Result};

/// Smoothing constant of the soft Dice loss.
pub const DICE_EPS: f64 = 1e-5;

/// Graph nodes of one Dice + cross-entropy evaluation.
#[derive(Clone, Copy, Debug)]
pub struct DiceCe {
    pub total: Var,
    pub dice: Var,
    pub ce: Var,
}

/// Soft Dice plus cross-entropy over the first `k_t` channels of `logits`.
/// Channels from `k_t` on never enter the graph, so the head weights that
/// feed them receive exactly zero gradient.
pub fn dice_ce_loss<T: Real>(g: &mut Graph<T>, logits: Var, labels: &[u8], k_t: usize) -> Result<DiceCe> {
    let width = g.value(logits).shape().first().copied().unwrap_or(0);
    if k_t < 2 || k_t > width {
        return Err(Error::Task(format!(
            "task class count {k_t} must lie in 2..={width} (head width)"
        )));
    }
    let sliced = g.narrow_channels(logits, 0, k_t)?;
    let ce = g.cross_entropy(sliced, labels)?;
    let probs = g.softmax_channel(sliced)?;
    let dice = g.soft_dice_loss(probs, labels, DICE_EPS)?;
    let total = g.add(ce, dice)?;
    Ok(DiceCe { total, dice, ce })
}

/// Deep-supervision weights `w_s ∝ decay^s`, normalised to sum to one.
pub fn ds_weights(scales: usize, decay: f64) -> Vec<f64> {
    let raw: Vec<f64> = (0..scales).map(|s| decay.powi(s as i32)).collect();
    let sum: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / sum).collect()
}

/// Nearest-neighbour label downsampling by integer `factors`: output voxel
/// `i` takes the label at `i * factor`.
pub fn downsample_labels(labels: &[u8], dims: Triple, factors: Triple) -> Result<Vec<u8>> {
    if labels.len() != dims.iter().product::<usize>() {
        return Err(Error::Dimension(format!(
            "{} labels for volume {dims:?}",
            labels.len()
        )));
    }
    for a in 0..3 {
        if factors[a] == 0 || dims[a] % factors[a] != 0 {
            return Err(Error::Dimension(format!(
                "label extent {dims:?} is not divisible by {factors:?}"
            )));
        }
    }
    let [d, h, w] = dims;
    let [od, oh, ow] = [d / factors[0], h / factors[1], w / factors[2]];
    let mut out = Vec::with_capacity(od * oh * ow);
    for z in 0..od {
        for y in 0..oh {
            let row = ((z * factors[0]) * h + y * factors[1]) * w;
            out.extend((0..ow).map(|x| labels[row + x * factors[2]]));
        }
    }
    Ok(out)
}

/// Labels matched to every logit scale, derived from the full-resolution map.
pub fn label_pyramid<T: Real>(g: &Graph<T>, logits: &[Var], labels: &[u8], dims: Triple) -> Result<Vec<Vec<u8>>> {
    logits
        .iter()
        .map(|&l| {
            let s = g.value(l).spatial();
            if s.iter().any(|&e| e == 0) {
                return Err(Error::Dimension(format!("empty logit extent {s:?}")));
            }
            let f = [dims[0] / s[0], dims[1] / s[1], dims[2] / s[2]];
            if f == [1, 1, 1] {
                Ok(labels.to_vec())
            } else {
                downsample_labels(labels, dims, f)
            }
        })
        .collect()
}

/// Values of one deep-supervision loss evaluation.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ScaleLosses {
    /// `dice_s + ce_s` per scale, highest resolution first.
    pub per_scale: Vec<f64>,
    /// `Σ w_s dice_s`.
    pub dice: f64,
    /// `Σ w_s ce_s`.
    pub ce: f64,
    pub total: f64,
}

/// `Σ_s w_s (dice_s + ce_s)` over matching logits and label maps.
pub fn deep_supervision_loss<T: Real>(
    g: &mut Graph<T>,
    logits: &[Var],
    labels: &[Vec<u8>],
    k_t: usize,
    weights: &[f64],
) -> Result<(Var, ScaleLosses)> {
    if logits.len() != weights.len() || labels.len() != weights.len() {
        return Err(Error::Dimension(format!(
            "{} logit scales, {} label maps and {} weights",
            logits.len(),
            labels.len(),
            weights.len()
        )));
    }
    if logits.is_empty() {
        return Err(Error::Dimension("deep supervision needs at least one scale".into()));
    }
    let mut report = ScaleLosses::default();
    let mut total: Option<Var> = None;
    for ((&l, lab), &w) in logits.iter().zip(labels).zip(weights) {
        let parts = dice_ce_loss(g, l, lab, k_t)?;
        let value = |g: &Graph<T>, v: Var| g.value(v).data()[0].to_f64().unwrap();
        report.per_scale.push(value(g, parts.total));
        report.dice += w * value(g, parts.dice);
        report.ce += w * value(g, parts.ce);
        let term = g.scale(parts.total, w);
        total = Some(match total {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    let total = total.expect("at least one scale");
    report.total = g.value(total).data()[0].to_f64().unwrap();
    Ok((total, report))
}
