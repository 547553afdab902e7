use ndarray::{Array3, Array4};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, Real, Var};
use crate::error::{ensure, Error, Result};

pub const DICE_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Weight of the Dice term; cross-entropy gets `1 - lambda_loss`.
    pub lambda_loss: f64,
    pub low_res: usize,
    pub high_res: usize,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self { lambda_loss: 0.8, low_res: 56, high_res: 224 }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        ensure!(
            (0.0..=1.0).contains(&self.lambda_loss),
            Error::Config(format!("loss weight {} outside [0, 1]", self.lambda_loss))
        );
        ensure!(
            self.low_res > 0 && self.low_res < self.high_res && self.high_res % self.low_res == 0,
            Error::Config(format!("resolutions {} / {} must be increasing multiples", self.low_res, self.high_res))
        );
        Ok(())
    }
}

/// Per-path terms and their weighted total.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub ce_low: f64,
    pub dice_low: f64,
    pub ce_high: f64,
    pub dice_high: f64,
    pub total: f64,
}

fn flat_target(target: &Array3<u8>, classes: usize) -> Result<Vec<usize>> {
    target
        .iter()
        .map(|&c| {
            ensure!(
                (c as usize) < classes,
                Error::Label(format!("class id {c} out of range for {classes} classes"))
            );
            Ok(c as usize)
        })
        .collect()
}

fn check_pair<T: Real>(pred: &Array4<T>, target: &Array3<u8>) -> Result<()> {
    let (b, _, h, w) = pred.dim();
    ensure!(
        target.dim() == (b, h, w),
        Error::Shape(format!("prediction {:?} vs target {:?}", pred.dim(), target.dim()))
    );
    Ok(())
}

/// Nearest-neighbour downsampling of `(B, H, W)` labels by an integer factor,
/// sampling the pixel at `factor·i + factor/2`.
pub fn downsample_labels(target: &Array3<u8>, size: usize) -> Result<Array3<u8>> {
    let (b, h, w) = target.dim();
    ensure!(
        size > 0 && h % size == 0 && w % size == 0,
        Error::Shape(format!("cannot downsample {h}x{w} labels to {size}"))
    );
    let (fy, fx) = (h / size, w / size);
    Ok(Array3::from_shape_fn((b, size, size), |(n, i, j)| target[[n, fy * i + fy / 2, fx * j + fx / 2]]))
}

/// Soft Dice loss over all classes (background included), per-class sums over
/// the whole batch.
pub fn dice_loss<T: Real>(probs: &Array4<T>, target: &Array3<u8>) -> Result<f64> {
    check_pair(probs, target)?;
    let t = flat_target(target, probs.dim().1)?;
    ensure!(
        probs.iter().all(|&p| p >= T::zero() && p <= T::one()),
        Error::Numeric("Dice loss needs probabilities in [0, 1]".into())
    );
    let mut g = Graph::new();
    let p = g.constant(probs.clone().into_dyn());
    let l = g.dice_loss(p, &t, T::lit(DICE_EPS));
    Ok(g.scalar(l).as_f64())
}

/// Mean pixel cross-entropy of `(B, N, H, W)` logits.
pub fn ce_loss<T: Real>(logits: &Array4<T>, target: &Array3<u8>) -> Result<f64> {
    check_pair(logits, target)?;
    ensure!(logits.iter().all(|v| v.is_finite()), Error::Numeric("non-finite logits".into()));
    let t = flat_target(target, logits.dim().1)?;
    let mut g = Graph::new();
    let l = g.constant(logits.clone().into_dyn());
    let loss = g.cross_entropy(l, &t);
    Ok(g.scalar(loss).as_f64())
}

/// Softmax over the class axis of `(B, N, H, W)`.
pub fn class_softmax<T: Real>(g: &mut Graph<T>, logits: Var) -> Var {
    let x = g.permute(logits, &[0, 2, 3, 1]);
    let x = g.softmax(x);
    g.permute(x, &[0, 3, 1, 2])
}

/// Graph terms of one path: `(CE, Dice(softmax))`.
pub fn path_terms<T: Real>(g: &mut Graph<T>, logits: Var, target: &[usize]) -> (Var, Var) {
    let ce = g.cross_entropy(logits, target);
    let probs = class_softmax(g, logits);
    let dice = g.dice_loss(probs, target, T::lit(DICE_EPS));
    (ce, dice)
}

/// Graph form of the objective. Returns the total and the four terms
/// `(ce_low, dice_low, ce_high, dice_high)`.
pub fn combined_loss_graph<T: Real>(
    g: &mut Graph<T>,
    low: Var,
    high: Var,
    target_low: &[usize],
    target_high: &[usize],
    lambda: f64,
) -> (Var, [Var; 4]) {
    let (ce_l, d_l) = path_terms(g, low, target_low);
    let (ce_h, d_h) = path_terms(g, high, target_high);
    let ce = g.add(ce_l, ce_h);
    let dice = g.add(d_l, d_h);
    let ce = g.scale(ce, T::lit(1.0 - lambda));
    let dice = g.scale(dice, T::lit(lambda));
    (g.add(ce, dice), [ce_l, d_l, ce_h, d_h])
}

/// `Σ_r (1-λ)·CE_r + λ·Dice_r` for logits at the two configured resolutions.
/// The target is given at the high resolution and downsampled for the low path.
pub fn combined_loss<T: Real>(
    pred_low: &Array4<T>,
    pred_high: &Array4<T>,
    target: &Array3<u8>,
    cfg: &LossConfig,
) -> Result<LossBreakdown> {
    cfg.validate()?;
    let res = |a: &Array4<T>| (a.dim().2, a.dim().3);
    ensure!(
        res(pred_low) == (cfg.low_res, cfg.low_res) && res(pred_high) == (cfg.high_res, cfg.high_res),
        Error::Shape(format!(
            "paths at {:?} / {:?}, configured {} / {}",
            res(pred_low),
            res(pred_high),
            cfg.low_res,
            cfg.high_res
        ))
    );
    check_pair(pred_high, target)?;
    ensure!(
        pred_low.iter().chain(pred_high.iter()).all(|v| v.is_finite()),
        Error::Numeric("non-finite logits".into())
    );
    let low_t = downsample_labels(target, cfg.low_res)?;
    let tl = flat_target(&low_t, pred_low.dim().1)?;
    let th = flat_target(target, pred_high.dim().1)?;
    let mut g = Graph::new();
    let l = g.constant(pred_low.clone().into_dyn());
    let h = g.constant(pred_high.clone().into_dyn());
    let (total, terms) = combined_loss_graph(&mut g, l, h, &tl, &th, cfg.lambda_loss);
    let v = |x: Var| g.scalar(x).as_f64();
    Ok(LossBreakdown {
        ce_low: v(terms[0]),
        dice_low: v(terms[1]),
        ce_high: v(terms[2]),
        dice_high: v(terms[3]),
        total: v(total),
    })
}

/// One-hot `(B, N, H, W)` encoding of labels.
pub fn one_hot<T: Real>(target: &Array3<u8>, classes: usize) -> Array4<T> {
    let (b, h, w) = target.dim();
    Array4::from_shape_fn((b, classes, h, w), |(n, c, y, x)| if target[[n, y, x]] as usize == c { T::one() } else { T::zero() })
}

/// Flattened `(B·H·W)` class ids, for the graph losses.
pub fn target_ids(target: &Array3<u8>, classes: usize) -> Result<Vec<usize>> {
    flat_target(target, classes)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::gradcheck::check;
    use ndarray::{ArrayD, IxDyn};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn labels(b: usize, h: usize, w: usize, classes: u8, rng: &mut ChaCha8Rng) -> Array3<u8> {
        Array3::from_shape_fn((b, h, w), |_| rng.random_range(0..classes))
    }

    /// Straight-line Dice and CE used as oracles.
    fn dice_oracle(p: &Array4<f64>, t: &Array3<u8>) -> f64 {
        let (b, n, h, w) = p.dim();
        let mut total = 0.0;
        for c in 0..n {
            let (mut i, mut ps, mut ys) = (0.0, 0.0, 0.0);
            for bb in 0..b {
                for y in 0..h {
                    for x in 0..w {
                        let yv = if t[[bb, y, x]] as usize == c { 1.0 } else { 0.0 };
                        i += p[[bb, c, y, x]] * yv;
                        ps += p[[bb, c, y, x]];
                        ys += yv;
                    }
                }
            }
            total += (2.0 * i + DICE_EPS) / (ps + ys + DICE_EPS);
        }
        1.0 - total / n as f64
    }

    fn ce_oracle(l: &Array4<f64>, t: &Array3<u8>) -> f64 {
        let (b, n, h, w) = l.dim();
        let mut total = 0.0;
        for bb in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let z: f64 = (0..n).map(|c| l[[bb, c, y, x]].exp()).sum();
                    total -= (l[[bb, t[[bb, y, x]] as usize, y, x]].exp() / z).ln();
                }
            }
        }
        total / (b * h * w) as f64
    }

    #[test]
    fn perfect_dice_is_eps_limited() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = labels(2, 8, 8, 3, &mut rng);
        assert!(dice_loss(&one_hot::<f64>(&t, 3), &t).unwrap() <= 1e-4);
    }

    #[test]
    fn uniform_two_class_dice_is_half() {
        let t = Array3::from_shape_fn((1, 4, 4), |(_, y, _)| (y % 2) as u8);
        let p = Array4::from_elem((1, 2, 4, 4), 0.5);
        assert!((dice_loss(&p, &t).unwrap() - 0.5).abs() < 1e-5);
    }

    #[test]
    fn disjoint_dice_is_one() {
        let t = Array3::<u8>::zeros((1, 4, 4));
        let wrong = one_hot::<f64>(&Array3::from_elem((1, 4, 4), 1), 2);
        assert!((dice_loss(&wrong, &t).unwrap() - 1.0).abs() < 1e-4);
    }

    #[test]
    fn out_of_range_label_is_label_error() {
        let t = Array3::from_elem((1, 2, 2), 5u8);
        assert!(matches!(dice_loss(&Array4::<f64>::zeros((1, 3, 2, 2)), &t), Err(Error::Label(_))));
    }

    #[test]
    fn ce_reference_values() {
        let t = Array3::<u8>::zeros((1, 3, 3));
        let mut margin = Array4::<f64>::zeros((1, 9, 3, 3));
        margin.index_axis_mut(ndarray::Axis(1), 0).fill(50.0);
        assert!(ce_loss(&margin, &t).unwrap() < 1e-10);
        assert!((ce_loss(&Array4::<f64>::zeros((1, 9, 3, 3)), &t).unwrap() - 9f64.ln()).abs() < 1e-12);
        assert!((ce_loss(&Array4::<f64>::zeros((1, 2, 1, 1)), &Array3::zeros((1, 1, 1))).unwrap() - 2f64.ln()).abs() < 1e-12);
        let bad = Array4::from_elem((1, 2, 1, 1), f64::NAN);
        assert!(matches!(ce_loss(&bad, &Array3::zeros((1, 1, 1))), Err(Error::Numeric(_))));
    }

    #[test]
    fn losses_match_straight_line_oracles() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = labels(2, 5, 4, 4, &mut rng);
        let l = Array4::from_shape_fn((2, 4, 5, 4), |_| rng.random_range(-3.0..3.0));
        let p = l.mapv(|v: f64| 1.0 / (1.0 + (-v).exp()));
        assert!((ce_loss(&l, &t).unwrap() - ce_oracle(&l, &t)).abs() < 1e-12);
        assert!((dice_loss(&p, &t).unwrap() - dice_oracle(&p, &t)).abs() < 1e-12);
    }

    fn small_cfg(lambda: f64) -> LossConfig {
        LossConfig { lambda_loss: lambda, low_res: 4, high_res: 8 }
    }

    #[test]
    fn combined_recomposes_from_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let t = labels(1, 8, 8, 3, &mut rng);
        let low = Array4::from_shape_fn((1, 3, 4, 4), |_| rng.random_range(-2.0..2.0));
        let high = Array4::from_shape_fn((1, 3, 8, 8), |_| rng.random_range(-2.0..2.0));
        let r = combined_loss(&low, &high, &t, &small_cfg(0.8)).unwrap();
        let tl = downsample_labels(&t, 4).unwrap();
        let soft = |l: &Array4<f64>| {
            let mut p = l.mapv(f64::exp);
            let z = p.sum_axis(ndarray::Axis(1)).insert_axis(ndarray::Axis(1));
            p /= &z;
            p
        };
        let (ce_l, ce_h) = (ce_oracle(&low, &tl), ce_oracle(&high, &t));
        let (d_l, d_h) = (dice_oracle(&soft(&low), &tl), dice_oracle(&soft(&high), &t));
        assert!((r.total - (0.2 * (ce_l + ce_h) + 0.8 * (d_l + d_h))).abs() < 1e-9);
        let pure_ce = combined_loss(&low, &high, &t, &small_cfg(0.0)).unwrap();
        assert!((pure_ce.total - (ce_l + ce_h)).abs() < 1e-9);
        let pure_dice = combined_loss(&low, &high, &t, &small_cfg(1.0)).unwrap();
        assert!((pure_dice.total - (d_l + d_h)).abs() < 1e-9);
        let mid = combined_loss(&low, &high, &t, &small_cfg(0.5)).unwrap();
        assert!((mid.total - 0.5 * (pure_ce.total + pure_dice.total)).abs() < 1e-9);
    }

    #[test]
    fn wrong_resolution_is_shape_error() {
        let t = Array3::<u8>::zeros((1, 8, 8));
        let r = combined_loss(&Array4::<f64>::zeros((1, 2, 2, 2)), &Array4::zeros((1, 2, 8, 8)), &t, &small_cfg(0.8));
        assert!(matches!(r, Err(Error::Shape(_))));
    }

    #[test]
    fn nearest_downsampling_picks_block_centres() {
        let t = Array3::from_shape_fn((1, 8, 8), |(_, y, x)| (y * 8 + x) as u8);
        let d = downsample_labels(&t, 2).unwrap();
        assert_eq!(d.as_slice().unwrap(), &[18, 22, 50, 54]);
    }

    #[test]
    fn dice_loss_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let t: Vec<usize> = (0..16).map(|_| rng.random_range(0..2)).collect();
        let p = ArrayD::from_shape_fn(IxDyn(&[1, 2, 4, 4]), |_| rng.random_range(0.05..0.95));
        let r = check(&[p], 1e-5, |g, v| g.dice_loss(v[0], &t, DICE_EPS));
        assert!(r[0].rel_error < 1e-4, "{r:?}");
    }
}
