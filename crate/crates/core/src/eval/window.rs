use crate::autodiff::{softmax_into, Real, Tensor, Triple};
use crate::error::{Error, Result};
use crate::net::Model;

pub const DEFAULT_OVERLAP: f64 = 0.5;

/// Anything that maps a window to per-class probabilities.
pub trait WindowModel<T> {
    /// Number of output classes for `task_id`.
    fn task_classes(&self, task_id: usize) -> Result<usize>;

    /// Class probabilities `[K_t, d, h, w]` for one window `[C, d, h, w]`.
    fn window_probs(&self, window: &Tensor<T>, task_id: usize) -> Result<Tensor<T>>;
}

impl<T: Real> WindowModel<T> for Model<T> {
    fn task_classes(&self, task_id: usize) -> Result<usize> {
        Ok(self.registry().get(task_id)?.num_classes)
    }

    fn window_probs(&self, window: &Tensor<T>, task_id: usize) -> Result<Tensor<T>> {
        let k = self.task_classes(task_id)?;
        let logits = self.forward_tensor(window, task_id)?.swap_remove(0);
        let vox = logits.voxels();
        let mut probs = vec![T::zero(); k * vox];
        softmax_into(&logits.data()[..k * vox], k, vox, &mut probs);
        let [d, h, w] = logits.spatial();
        Tensor::new(vec![k, d, h, w], probs)
    }
}

/// Window origins along one axis of length `len`: `0, step, 2 step, ...`
/// with the last window flush with the end.
pub fn window_positions(len: usize, window: usize, step: usize) -> Vec<usize> {
    if len <= window {
        return vec![0];
    }
    let step = step.max(1);
    let last = len - window;
    let mut out: Vec<usize> = (0..last).step_by(step).collect();
    out.push(last);
    out
}

fn check_overlap(overlap: f64) -> Result<()> {
    if !(0.0..=0.9).contains(&overlap) {
        return Err(Error::Config(format!("window overlap must lie in [0, 0.9], got {overlap}")));
    }
    Ok(())
}

/// Coverage-averaged probability field `[K_t, D, H, W]` of `volume`. Axes
/// shorter than the window are zero-padded symmetrically; the padding is
/// cropped from the result.
pub fn sliding_window_probs<T: Real, M: WindowModel<T> + ?Sized>(
    model: &M,
    volume: &Tensor<T>,
    task_id: usize,
    window: Triple,
    overlap: f64,
) -> Result<Tensor<T>> {
    check_overlap(overlap)?;
    if volume.rank() != 4 {
        return Err(Error::Dimension(format!("volume must be [C, D, H, W], got {:?}", volume.shape())));
    }
    if window.contains(&0) {
        return Err(Error::Dimension(format!("empty window {window:?}")));
    }
    let k = model.task_classes(task_id)?;
    let c = volume.channels();
    let dims = volume.spatial();
    let padded: Triple = [0, 1, 2].map(|a| dims[a].max(window[a]));
    let pad: Triple = [0, 1, 2].map(|a| (padded[a] - dims[a]) / 2);
    let step: Triple = [0, 1, 2].map(|a| ((window[a] as f64) * (1.0 - overlap)).floor() as usize);
    let starts: Vec<Vec<usize>> = (0..3).map(|a| window_positions(padded[a], window[a], step[a])).collect();

    let [pd, ph, pw] = padded;
    let pvox = pd * ph * pw;
    let mut acc = vec![T::zero(); k * pvox];
    let mut count = vec![0u32; pvox];
    let [wd, wh, ww] = window;
    let wvox = wd * wh * ww;
    let vvox = dims.iter().product::<usize>();
    for &z0 in &starts[0] {
        for &y0 in &starts[1] {
            for &x0 in &starts[2] {
                let mut win = vec![T::zero(); c * wvox];
                for z in 0..wd {
                    let Some(sz) = (z0 + z).checked_sub(pad[0]).filter(|&v| v < dims[0]) else { continue };
                    for y in 0..wh {
                        let Some(sy) = (y0 + y).checked_sub(pad[1]).filter(|&v| v < dims[1]) else { continue };
                        for x in 0..ww {
                            let Some(sx) = (x0 + x).checked_sub(pad[2]).filter(|&v| v < dims[2]) else { continue };
                            let s = (sz * dims[1] + sy) * dims[2] + sx;
                            let d = (z * wh + y) * ww + x;
                            for ch in 0..c {
                                win[ch * wvox + d] = volume.data()[ch * vvox + s];
                            }
                        }
                    }
                }
                let probs = model.window_probs(&Tensor::new(vec![c, wd, wh, ww], win)?, task_id)?;
                if probs.shape() != [k, wd, wh, ww] {
                    return Err(Error::Dimension(format!(
                        "window model returned {:?}, expected {:?}",
                        probs.shape(),
                        [k, wd, wh, ww]
                    )));
                }
                for z in 0..wd {
                    for y in 0..wh {
                        let row = ((z0 + z) * ph + y0 + y) * pw + x0;
                        let src = (z * wh + y) * ww;
                        for x in 0..ww {
                            count[row + x] += 1;
                            for cl in 0..k {
                                acc[cl * pvox + row + x] += probs.data()[cl * wvox + src + x];
                            }
                        }
                    }
                }
            }
        }
    }

    let mut out = vec![T::zero(); k * vvox];
    for cl in 0..k {
        for z in 0..dims[0] {
            for y in 0..dims[1] {
                for x in 0..dims[2] {
                    let p = ((z + pad[0]) * ph + y + pad[1]) * pw + x + pad[2];
                    let n = T::from_u32(count[p]).unwrap();
                    out[cl * vvox + (z * dims[1] + y) * dims[2] + x] = acc[cl * pvox + p] / n;
                }
            }
        }
    }
    Tensor::new(vec![k, dims[0], dims[1], dims[2]], out)
}

/// Argmax labels of [`sliding_window_probs`]. Ties go to the lower class.
pub fn sliding_window_infer<T: Real, M: WindowModel<T> + ?Sized>(
    model: &M,
    volume: &Tensor<T>,
    task_id: usize,
    window: Triple,
    overlap: f64,
) -> Result<Vec<u8>> {
    let probs = sliding_window_probs(model, volume, task_id, window, overlap)?;
    Ok(argmax_channels(&probs))
}

pub(crate) fn argmax_channels<T: Real>(probs: &Tensor<T>) -> Vec<u8> {
    let k = probs.channels();
    let vox = probs.voxels();
    (0..vox)
        .map(|v| {
            let mut best = 0;
            for c in 1..k {
                if probs.data()[c * vox + v] > probs.data()[best * vox + v] {
                    best = c;
                }
            }
            best as u8
        })
        .collect()
}
