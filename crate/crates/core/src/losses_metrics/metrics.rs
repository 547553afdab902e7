use std::io::Write;
use std::path::Path;

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{ensure, Error, Result};
use crate::ORGANS;

/// `2|A∩B| / (|A| + |B|)` for one class id; two empty masks score 1.
pub fn dice_score(pred: ArrayView2<'_, u8>, target: ArrayView2<'_, u8>, class: u8) -> Result<f64> {
    ensure!(
        pred.dim() == target.dim(),
        Error::Shape(format!("prediction {:?} vs target {:?}", pred.dim(), target.dim()))
    );
    let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
    for (&p, &t) in pred.iter().zip(target.iter()) {
        let (p, t) = (p == class, t == class);
        a += p as usize;
        b += t as usize;
        both += (p && t) as usize;
    }
    Ok(if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 })
}

/// Mean Dice over the organ classes `1..=8`; background is not scored.
pub fn mdice(pred: ArrayView2<'_, u8>, target: ArrayView2<'_, u8>) -> Result<f64> {
    let mut total = 0.0;
    for c in 1..=ORGANS.len() as u8 {
        total += dice_score(pred, target, c)?;
    }
    Ok(total / ORGANS.len() as f64)
}

/// Foreground pixels with at least one 4-neighbour outside the mask; pixels
/// beyond the image border count as outside.
pub fn boundary(mask: ArrayView2<'_, bool>) -> Vec<(usize, usize)> {
    let (h, w) = mask.dim();
    let mut out = Vec::new();
    for y in 0..h {
        for x in 0..w {
            if !mask[[y, x]] {
                continue;
            }
            let edge = y == 0 || x == 0 || y + 1 == h || x + 1 == w;
            if edge || !mask[[y - 1, x]] || !mask[[y + 1, x]] || !mask[[y, x - 1]] || !mask[[y, x + 1]] {
                out.push((y, x));
            }
        }
    }
    out
}

/// Exact squared distance transform of a 1-D sampled function (lower envelope
/// of parabolas). `f` holds squared distances or `INF`.
fn edt_1d(f: &[f64], out: &mut [f64], v: &mut [usize], z: &mut [f64]) {
    let n = f.len();
    let mut k = 0usize;
    v[0] = 0;
    z[0] = f64::NEG_INFINITY;
    z[1] = f64::INFINITY;
    let mut first_finite = f[0].is_finite();
    for q in 1..n {
        if !f[q].is_finite() {
            continue;
        }
        if !first_finite {
            v[0] = q;
            first_finite = true;
            continue;
        }
        loop {
            let p = v[k];
            let s = ((f[q] + (q * q) as f64) - (f[p] + (p * p) as f64)) / (2.0 * q as f64 - 2.0 * p as f64);
            if s <= z[k] {
                k -= 1;
                continue;
            }
            k += 1;
            v[k] = q;
            z[k] = s;
            z[k + 1] = f64::INFINITY;
            break;
        }
    }
    if !first_finite {
        out.iter_mut().for_each(|o| *o = f64::INFINITY);
        return;
    }
    let mut k = 0;
    for (q, o) in out.iter_mut().enumerate() {
        while z[k + 1] < q as f64 {
            k += 1;
        }
        let d = q as f64 - v[k] as f64;
        *o = d * d + f[v[k]];
    }
}

/// Squared Euclidean distance from every pixel to the nearest `true` pixel.
pub fn squared_distance_transform(seeds: ArrayView2<'_, bool>) -> Array2<f64> {
    let (h, w) = seeds.dim();
    let n = h.max(w);
    let (mut v, mut z) = (vec![0usize; n], vec![0.0f64; n + 1]);
    let mut f = vec![0.0; n];
    let mut out = vec![0.0; n];
    let mut d = seeds.mapv(|s| if s { 0.0 } else { f64::INFINITY });
    for x in 0..w {
        for y in 0..h {
            f[y] = d[[y, x]];
        }
        edt_1d(&f[..h], &mut out[..h], &mut v, &mut z);
        for y in 0..h {
            d[[y, x]] = out[y];
        }
    }
    for y in 0..h {
        for x in 0..w {
            f[x] = d[[y, x]];
        }
        edt_1d(&f[..w], &mut out[..w], &mut v, &mut z);
        for x in 0..w {
            d[[y, x]] = out[x];
        }
    }
    d
}

/// Percentile with linear interpolation between closest ranks.
pub fn percentile(values: &mut [f64], q: f64) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).expect("finite distances"));
    let pos = q / 100.0 * (values.len() - 1) as f64;
    let (lo, hi) = (pos.floor() as usize, pos.ceil() as usize);
    values[lo] + (values[hi] - values[lo]) * (pos - lo as f64)
}

/// Boundary-to-boundary nearest distances in both directions, pooled.
pub fn surface_distances(pred: ArrayView2<'_, bool>, target: ArrayView2<'_, bool>) -> Result<Option<Vec<f64>>> {
    ensure!(
        pred.dim() == target.dim(),
        Error::Shape(format!("masks {:?} vs {:?}", pred.dim(), target.dim()))
    );
    let (bp, bt) = (boundary(pred), boundary(target));
    if bp.is_empty() || bt.is_empty() {
        return Ok(None);
    }
    let seeds = |pts: &[(usize, usize)]| {
        let mut m = Array2::from_elem(pred.dim(), false);
        pts.iter().for_each(|&p| m[p] = true);
        squared_distance_transform(m.view())
    };
    let (dp, dt) = (seeds(&bp), seeds(&bt));
    let mut d: Vec<f64> = bp.iter().map(|&p| dt[p].sqrt()).collect();
    d.extend(bt.iter().map(|&p| dp[p].sqrt()));
    Ok(Some(d))
}

/// 95th-percentile symmetric boundary distance in pixels; `None` when either
/// mask is empty.
pub fn hd95(pred: ArrayView2<'_, bool>, target: ArrayView2<'_, bool>) -> Result<Option<f64>> {
    Ok(surface_distances(pred, target)?.map(|mut d| percentile(&mut d, 95.0)))
}

/// Metrics of one case (a slice, or a stacked volume via [`evaluate_volume`]).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub case_id: String,
    pub per_class_dice: Vec<f64>,
    pub per_class_hd95: Vec<Option<f64>>,
    pub mdice: f64,
    /// Mean over organs with a defined HD95.
    pub hd95: Option<f64>,
}

impl MetricReport {
    fn from_parts(case_id: &str, dice: Vec<f64>, hd: Vec<Option<f64>>) -> Self {
        let mdice = dice.iter().sum::<f64>() / dice.len() as f64;
        let defined: Vec<f64> = hd.iter().flatten().copied().collect();
        let hd95 = (!defined.is_empty()).then(|| defined.iter().sum::<f64>() / defined.len() as f64);
        Self { case_id: case_id.to_string(), per_class_dice: dice, per_class_hd95: hd, mdice, hd95 }
    }
}

pub fn evaluate_case(case_id: &str, pred: ArrayView2<'_, u8>, target: ArrayView2<'_, u8>) -> Result<MetricReport> {
    let mut dice = Vec::with_capacity(ORGANS.len());
    let mut hd = Vec::with_capacity(ORGANS.len());
    for c in 1..=ORGANS.len() as u8 {
        dice.push(dice_score(pred, target, c)?);
        hd.push(hd95(pred.mapv(|v| v == c).view(), target.mapv(|v| v == c).view())?);
    }
    Ok(MetricReport::from_parts(case_id, dice, hd))
}

/// Per-volume aggregation over a stack of slices: Dice from pooled voxel
/// counts, HD95 from in-plane boundary distances pooled across slices.
pub fn evaluate_volume(case_id: &str, slices: &[(Array2<u8>, Array2<u8>)]) -> Result<MetricReport> {
    ensure!(!slices.is_empty(), Error::Argument("volume has no slices".into()));
    let mut dice = Vec::with_capacity(ORGANS.len());
    let mut hd = Vec::with_capacity(ORGANS.len());
    for c in 1..=ORGANS.len() as u8 {
        let (mut a, mut b, mut both) = (0usize, 0usize, 0usize);
        let mut dists = Vec::new();
        let (mut any_p, mut any_t) = (false, false);
        for (p, t) in slices {
            ensure!(p.dim() == t.dim(), Error::Shape(format!("slice {:?} vs {:?}", p.dim(), t.dim())));
            let (pm, tm) = (p.mapv(|v| v == c), t.mapv(|v| v == c));
            a += pm.iter().filter(|&&v| v).count();
            b += tm.iter().filter(|&&v| v).count();
            both += pm.iter().zip(tm.iter()).filter(|(x, y)| **x && **y).count();
            let (ep, et) = (pm.iter().any(|&v| v), tm.iter().any(|&v| v));
            any_p |= ep;
            any_t |= et;
            if let Some(d) = surface_distances(pm.view(), tm.view())? {
                dists.extend(d);
            }
        }
        dice.push(if a + b == 0 { 1.0 } else { 2.0 * both as f64 / (a + b) as f64 });
        hd.push((any_p && any_t && !dists.is_empty()).then(|| percentile(&mut dists, 95.0)));
    }
    Ok(MetricReport::from_parts(case_id, dice, hd))
}

/// Column-per-organ summary in report order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub spleen: f64,
    pub kidney_r: f64,
    pub kidney_l: f64,
    pub gallbladder: f64,
    pub liver: f64,
    pub stomach: f64,
    pub aorta: f64,
    pub pancreas: f64,
    #[serde(rename = "mDice")]
    pub mdice: f64,
    #[serde(rename = "HD95")]
    pub hd95: Option<f64>,
    pub cases: usize,
    /// (case, organ) pairs excluded from HD95 because a mask was empty.
    pub hd95_undefined: usize,
}

impl MetricSummary {
    pub fn organ_dice(&self) -> [f64; 8] {
        [self.spleen, self.kidney_r, self.kidney_l, self.gallbladder, self.liver, self.stomach, self.aorta, self.pancreas]
    }
}

/// Organ columns are case means of Dice; mDice is their mean; HD95 is the
/// mean over every defined (case, organ) value.
pub fn summarize(reports: &[MetricReport]) -> Result<MetricSummary> {
    ensure!(!reports.is_empty(), Error::Argument("no cases to summarize".into()));
    let n = reports.len() as f64;
    let mut col = [0.0; 8];
    let (mut hd_sum, mut hd_n, mut undefined) = (0.0, 0usize, 0usize);
    for r in reports {
        ensure!(
            r.per_class_dice.len() == 8 && r.per_class_hd95.len() == 8,
            Error::Validation(format!("case {} does not have 8 organ columns", r.case_id))
        );
        for (c, d) in r.per_class_dice.iter().enumerate() {
            col[c] += d / n;
        }
        for h in &r.per_class_hd95 {
            match h {
                Some(v) => {
                    hd_sum += v;
                    hd_n += 1;
                }
                None => undefined += 1,
            }
        }
    }
    Ok(MetricSummary {
        spleen: col[0],
        kidney_r: col[1],
        kidney_l: col[2],
        gallbladder: col[3],
        liver: col[4],
        stomach: col[5],
        aorta: col[6],
        pancreas: col[7],
        mdice: col.iter().sum::<f64>() / 8.0,
        hd95: (hd_n > 0).then(|| hd_sum / hd_n as f64),
        cases: reports.len(),
        hd95_undefined: undefined,
    })
}

/// One row per case per organ: `case_id,organ,dice,hd95` (empty when undefined).
pub fn write_csv<W: Write>(reports: &[MetricReport], out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    let csv_err = |e: csv::Error| Error::Validation(format!("csv: {e}"));
    w.write_record(["case_id", "organ", "dice", "hd95"]).map_err(csv_err)?;
    for r in reports {
        for (c, organ) in ORGANS.iter().enumerate() {
            let hd = r.per_class_hd95[c].map(|v| format!("{v:.6}")).unwrap_or_default();
            w.write_record([r.case_id.as_str(), organ, &format!("{:.6}", r.per_class_dice[c]), &hd]).map_err(csv_err)?;
        }
    }
    w.flush().map_err(|e| Error::Validation(format!("csv: {e}")))?;
    Ok(())
}

/// Reads rows written by [`write_csv`] back into per-case reports.
pub fn read_csv(path: &Path) -> Result<Vec<MetricReport>> {
    let mut rdr = csv::Reader::from_path(path).map_err(|e| Error::load(path, e.to_string()))?;
    let mut cases: Vec<(String, Vec<f64>, Vec<Option<f64>>)> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::load(path, e.to_string()))?;
        ensure!(rec.len() == 4, Error::load(path, format!("expected 4 columns, got {}", rec.len())));
        let organ = crate::organ_class(&rec[1])? - 1;
        let dice: f64 = rec[2].parse().map_err(|_| Error::load(path, format!("bad dice `{}`", &rec[2])))?;
        let hd = if rec[3].is_empty() {
            None
        } else {
            Some(rec[3].parse::<f64>().map_err(|_| Error::load(path, format!("bad hd95 `{}`", &rec[3])))?)
        };
        if cases.last().map(|c| c.0.as_str()) != Some(&rec[0]) {
            cases.push((rec[0].to_string(), vec![f64::NAN; 8], vec![None; 8]));
        }
        let case = cases.last_mut().expect("pushed");
        case.1[organ] = dice;
        case.2[organ] = hd;
    }
    cases
        .into_iter()
        .map(|(id, d, h)| {
            ensure!(d.iter().all(|v| v.is_finite()), Error::load(path, format!("case {id} is missing organs")));
            Ok(MetricReport::from_parts(&id, d, h))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// All-pairs boundary distances, pooled both ways.
    fn hd95_oracle(a: &Array2<bool>, b: &Array2<bool>) -> Option<f64> {
        let (ba, bb) = (boundary(a.view()), boundary(b.view()));
        if ba.is_empty() || bb.is_empty() {
            return None;
        }
        let nearest = |p: (usize, usize), set: &[(usize, usize)]| {
            set.iter()
                .map(|q| ((p.0 as f64 - q.0 as f64).powi(2) + (p.1 as f64 - q.1 as f64).powi(2)).sqrt())
                .fold(f64::INFINITY, f64::min)
        };
        let mut d: Vec<f64> = ba.iter().map(|&p| nearest(p, &bb)).collect();
        d.extend(bb.iter().map(|&p| nearest(p, &ba)));
        d.sort_by(|x, y| x.partial_cmp(y).unwrap());
        let pos = 0.95 * (d.len() - 1) as f64;
        let lo = pos.floor() as usize;
        let hi = pos.ceil() as usize;
        Some(d[lo] + (d[hi] - d[lo]) * (pos - lo as f64))
    }

    fn random_mask(rng: &mut ChaCha8Rng, density: f64) -> Array2<bool> {
        Array2::from_shape_fn((16, 16), |_| rng.random_bool(density))
    }

    #[test]
    fn dice_reference_values() {
        let a = Array2::from_shape_fn((4, 4), |(y, x)| if y == 0 { 1u8 } else { (x >= 4) as u8 });
        let b = Array2::from_shape_fn((4, 4), |(y, x)| if (y == 0 && x < 2) || (y == 1 && x < 2) { 1u8 } else { 0 });
        assert_eq!(dice_score(a.view(), a.view(), 1).unwrap(), 1.0);
        assert_eq!(dice_score(a.view(), b.view(), 1).unwrap(), 0.5);
        let c = Array2::from_shape_fn((4, 4), |(y, _)| (y == 3) as u8);
        assert_eq!(dice_score(a.view(), c.view(), 1).unwrap(), 0.0);
        assert_eq!(dice_score(a.view(), c.view(), 7).unwrap(), 1.0);
    }

    #[test]
    fn hd95_reference_values() {
        let mut a = Array2::from_elem((5, 8), false);
        let mut b = a.clone();
        a[[2, 1]] = true;
        b[[2, 4]] = true;
        assert_eq!(hd95(a.view(), a.view()).unwrap(), Some(0.0));
        assert_eq!(hd95(a.view(), b.view()).unwrap(), Some(3.0));
        let sq = Array2::from_shape_fn((16, 16), |(y, x)| (3..12).contains(&y) && (3..12).contains(&x));
        let shifted = Array2::from_shape_fn((16, 16), |(y, x)| (3..12).contains(&y) && (4..13).contains(&x));
        let fast = hd95(sq.view(), shifted.view()).unwrap().unwrap();
        assert!((fast - 1.0).abs() < 1e-12, "{fast}");
        assert_eq!(hd95_oracle(&sq, &shifted), Some(fast));
        assert_eq!(hd95(a.view(), Array2::from_elem((5, 8), false).view()).unwrap(), None);
        assert!(matches!(hd95(a.view(), sq.view()), Err(Error::Shape(_))));
    }

    #[test]
    fn fast_hd95_matches_all_pairs_on_100_pairs() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for i in 0..100 {
            let a = random_mask(&mut rng, 0.05 + 0.4 * (i % 5) as f64 / 5.0);
            let b = random_mask(&mut rng, 0.05 + 0.3 * (i % 3) as f64 / 3.0);
            let fast = hd95(a.view(), b.view()).unwrap();
            let slow = hd95_oracle(&a, &b);
            match (fast, slow) {
                (Some(f), Some(s)) => assert!((f - s).abs() < 1e-9, "pair {i}: {f} vs {s}"),
                (f, s) => assert_eq!(f, s),
            }
        }
    }

    #[test]
    fn distance_transform_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let seeds = Array2::from_shape_fn((9, 13), |_| rng.random_bool(0.08));
            let dt = squared_distance_transform(seeds.view());
            let pts: Vec<(usize, usize)> = seeds.indexed_iter().filter(|(_, &s)| s).map(|(p, _)| p).collect();
            for ((y, x), &d) in dt.indexed_iter() {
                let want = pts
                    .iter()
                    .map(|&(py, px)| (y as f64 - py as f64).powi(2) + (x as f64 - px as f64).powi(2))
                    .fold(f64::INFINITY, f64::min);
                assert_eq!(d, want);
            }
        }
    }

    #[test]
    fn summary_and_csv_round_trip() {
        let t = Array2::from_shape_fn((16, 16), |(y, x)| ((y / 4) * 2 + (x / 8)) as u8 % 9);
        let mut p = t.clone();
        p[[0, 0]] = 3;
        let reports = vec![evaluate_case("a", p.view(), t.view()).unwrap(), evaluate_case("b", t.view(), t.view()).unwrap()];
        assert_eq!(reports[1].mdice, 1.0);
        let s = summarize(&reports).unwrap();
        assert!((s.mdice - (reports[0].mdice + reports[1].mdice) / 2.0).abs() < 1e-12);
        let json = serde_json::to_value(&s).unwrap();
        let keys: Vec<&str> = json.as_object().unwrap().keys().map(String::as_str).collect();
        for k in ORGANS.iter().copied().chain(["mDice", "HD95"]) {
            assert!(keys.contains(&k), "{k}");
        }
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("m.csv");
        write_csv(&reports, std::fs::File::create(&path).unwrap()).unwrap();
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().count(), 1 + 2 * 8);
        let back = read_csv(&path).unwrap();
        assert_eq!(back.len(), 2);
        for (x, y) in back.iter().zip(&reports) {
            assert!((x.mdice - y.mdice).abs() < 1e-6);
        }
    }

    #[test]
    fn volume_of_one_slice_matches_the_slice() {
        let t = Array2::from_shape_fn((12, 12), |(y, x)| if (2..8).contains(&y) && (3..9).contains(&x) { 5u8 } else { 0 });
        let p = Array2::from_shape_fn((12, 12), |(y, x)| if (3..8).contains(&y) && (3..10).contains(&x) { 5u8 } else { 0 });
        let a = evaluate_case("c", p.view(), t.view()).unwrap();
        let v = evaluate_volume("c", &[(p, t)]).unwrap();
        assert_eq!(a, v);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]

        #[test]
        fn metrics_are_symmetric(seed in 0u64..100_000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = random_mask(&mut rng, 0.3);
            let b = random_mask(&mut rng, 0.2);
            prop_assert_eq!(hd95(a.view(), b.view()).unwrap(), hd95(b.view(), a.view()).unwrap());
            let (la, lb) = (a.mapv(u8::from), b.mapv(u8::from));
            prop_assert_eq!(dice_score(la.view(), lb.view(), 1).unwrap(), dice_score(lb.view(), la.view(), 1).unwrap());
            let d = dice_score(la.view(), lb.view(), 1).unwrap();
            prop_assert!((0.0..=1.0).contains(&d));
        }
    }
}
