use std::fmt::Write as _;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, Tensor, Triple};
use crate::error::Result;
use crate::net::Model;
use crate::train::{ds_weights, sample_loss};

pub const GRADCHECK_TOLERANCE: f64 = 1e-4;
pub const GRADCHECK_STEP: f64 = 1e-5;
/// Smaller steps tried when the first one moves an activation across its kink.
const FALLBACK_STEPS: [f64; 2] = [1e-6, 1e-7];
pub const GRADCHECK_COORDS: usize = 20;
/// Gradients below this magnitude are compared in absolute terms.
pub const GRADCHECK_FLOOR: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub enum GroupStatus {
    Checked {
        coords: usize,
        /// Coordinates skipped because every step crossed an activation kink.
        kink_skipped: usize,
        max_rel_err: f64,
        max_abs_analytic: f64,
        max_abs_numeric: f64,
    },
    NonTrainable,
}

#[derive(Clone, Debug, PartialEq)]
pub struct GroupReport {
    pub name: String,
    pub status: GroupStatus,
}

impl GroupReport {
    pub fn passed(&self, tolerance: f64) -> bool {
        match self.status {
            GroupStatus::Checked { max_rel_err, .. } => max_rel_err < tolerance,
            GroupStatus::NonTrainable => true,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    pub groups: Vec<GroupReport>,
    pub tolerance: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.groups.iter().all(|g| g.passed(self.tolerance))
    }

    pub fn failures(&self) -> Vec<&GroupReport> {
        self.groups.iter().filter(|g| !g.passed(self.tolerance)).collect()
    }

    pub fn group(&self, name: &str) -> Option<&GroupReport> {
        self.groups.iter().find(|g| g.name == name)
    }

    pub fn max_rel_err(&self) -> f64 {
        self.groups
            .iter()
            .filter_map(|g| match g.status {
                GroupStatus::Checked { max_rel_err, .. } => Some(max_rel_err),
                GroupStatus::NonTrainable => None,
            })
            .fold(0.0, f64::max)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for g in &self.groups {
            match g.status {
                GroupStatus::Checked {
                    coords,
                    max_rel_err,
                    max_abs_analytic,
                    ..
                } => {
                    let verdict = if g.passed(self.tolerance) { "ok" } else { "FAIL" };
                    writeln!(
                        s,
                        "{:<40} {coords:>3} coords  max rel err {max_rel_err:.3e}  max |grad| {max_abs_analytic:.3e}  {verdict}",
                        g.name
                    )
                    .unwrap();
                }
                GroupStatus::NonTrainable => writeln!(s, "{:<40} non-trainable, skipped", g.name).unwrap(),
            }
        }
        s
    }
}

/// `|a - n| / max(|a|, |n|, GRADCHECK_FLOOR)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
    (analytic - numeric).abs() / denom
}

/// Compares backward gradients of the deep-supervision loss with central
/// differences on a random `probe`-sized input, for up to
/// [`GRADCHECK_COORDS`] coordinates of every parameter tensor. A difference
/// is only used when neither perturbation flips a leaky ReLU input across
/// zero; otherwise smaller steps are tried and, failing those, another
/// coordinate is drawn. The model's patch must equal `probe` for variants
/// whose prompt is sized by the patch.
pub fn grad_check_model(model: &mut Model<f64>, task_id: usize, probe: Triple, seed: u64) -> Result<GradCheckReport> {
    probe_matches(model, probe)?;
    let task = model.registry().get(task_id)?.clone();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let image = Tensor::from_fn(&[task.in_channels, probe[0], probe[1], probe[2]], |_| rng.random_range(-1.0..1.0));
    let labels: Vec<u8> = (0..probe.iter().product::<usize>())
        .map(|_| rng.random_range(0..task.num_classes) as u8)
        .collect();
    let weights = ds_weights(model.supervised_stages().len(), 0.5);

    let eval = |model: &Model<f64>| -> Result<(f64, Vec<bool>)> {
        let mut g = Graph::new();
        let (loss, _) = sample_loss(model, &mut g, &image, &labels, task_id, &weights)?;
        Ok((g.value(loss).data()[0], g.activation_pattern()))
    };

    model.params_mut().zero_grad();
    let mut g = Graph::new();
    let (loss, _) = sample_loss(model, &mut g, &image, &labels, task_id, &weights)?;
    let base_pattern = g.activation_pattern();
    g.backward_into(loss, model.params_mut(), 1.0)?;

    let ids: Vec<_> = model.params().iter().map(|(id, _)| id).collect();
    let mut groups = Vec::with_capacity(ids.len());
    for id in ids {
        let p = model.params().get(id);
        let name = p.name.clone();
        if !p.trainable {
            groups.push(GroupReport {
                name,
                status: GroupStatus::NonTrainable,
            });
            continue;
        }
        let n = p.value.len();
        let order = sample(&mut rng, n, n).into_vec();
        let (mut coords, mut kink_skipped) = (0, 0);
        let (mut max_rel, mut max_a, mut max_n) = (0.0f64, 0.0f64, 0.0f64);
        for i in order {
            if coords == GRADCHECK_COORDS {
                break;
            }
            let a = model.params().get(id).grad.data()[i];
            let orig = model.params().get(id).value.data()[i];
            let mut numeric = None;
            for h in std::iter::once(GRADCHECK_STEP).chain(FALLBACK_STEPS) {
                model.params_mut().get_mut(id).value.data_mut()[i] = orig + h;
                let (plus, pat_plus) = eval(model)?;
                model.params_mut().get_mut(id).value.data_mut()[i] = orig - h;
                let (minus, pat_minus) = eval(model)?;
                model.params_mut().get_mut(id).value.data_mut()[i] = orig;
                if pat_plus == base_pattern && pat_minus == base_pattern {
                    numeric = Some((plus - minus) / (2.0 * h));
                    break;
                }
            }
            let Some(numeric) = numeric else {
                kink_skipped += 1;
                continue;
            };
            coords += 1;
            max_rel = max_rel.max(relative_error(a, numeric));
            max_a = max_a.max(a.abs());
            max_n = max_n.max(numeric.abs());
        }
        groups.push(GroupReport {
            name,
            status: GroupStatus::Checked {
                coords,
                kink_skipped,
                max_rel_err: max_rel,
                max_abs_analytic: max_a,
                max_abs_numeric: max_n,
            },
        });
    }
    model.params_mut().zero_grad();
    Ok(GradCheckReport {
        groups,
        tolerance: GRADCHECK_TOLERANCE,
    })
}

fn probe_matches(model: &Model<f64>, probe: Triple) -> Result<()> {
    model.config().check_divisible(probe)?;
    if model.variant().has_fuse() && probe != model.config().patch {
        return Err(crate::error::Error::Config(format!(
            "probe {probe:?} must equal the model patch {:?} when the prompt is sized by the patch",
            model.config().patch
        )));
    }
    Ok(())
}
