//! Confusion matrices and the segmentation scores derived from them.

use std::fmt::Write as _;

use serde::Serialize;

use crate::error::{Error, Result};

/// `K×K` counts; rows are ground truth, columns predictions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    k: usize,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(k: usize) -> Self {
        ConfusionMatrix { k, counts: vec![0; k * k] }
    }

    pub fn from_counts(k: usize, counts: Vec<u64>) -> Result<Self> {
        if counts.len() != k * k {
            return Err(Error::dims("confusion matrix", &[k, k], &[counts.len()]));
        }
        Ok(ConfusionMatrix { k, counts })
    }

    pub fn num_classes(&self) -> usize {
        self.k
    }

    pub fn get(&self, truth: usize, pred: usize) -> u64 {
        self.counts[truth * self.k + pred]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn row(&self, k: usize) -> u64 {
        self.counts[k * self.k..(k + 1) * self.k].iter().sum()
    }

    pub fn col(&self, k: usize) -> u64 {
        (0..self.k).map(|r| self.get(r, k)).sum()
    }

    /// Accumulates one `width`-wide image. Pixels whose label is
    /// `ignore_index` are skipped.
    pub fn update(&mut self, pred: &[u8], label: &[u8], width: usize, ignore_index: u8) -> Result<()> {
        if pred.len() != label.len() {
            return Err(Error::dims("confusion update", &[pred.len()], &[label.len()]));
        }
        let w = width.max(1);
        for (i, (&p, &l)) in pred.iter().zip(label).enumerate() {
            if l == ignore_index {
                continue;
            }
            let (p, l) = (p as usize, l as usize);
            if p >= self.k || l >= self.k {
                return Err(Error::Data {
                    msg: format!("class {} outside [0, {})", p.max(l), self.k),
                    row: i / w,
                    col: i % w,
                });
            }
            self.counts[l * self.k + p] += 1;
        }
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.k != self.k {
            return Err(Error::dims("confusion merge", &[self.k], &[other.k]));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn summary(&self) -> Result<Summary> {
        let n = self.total();
        if n == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let nf = n as f64;
        let mut iou = Vec::with_capacity(self.k);
        let mut trace = 0u64;
        let mut pe = 0.0;
        for c in 0..self.k {
            let tp = self.get(c, c);
            let (row, col) = (self.row(c), self.col(c));
            trace += tp;
            pe += (row as f64 / nf) * (col as f64 / nf);
            let union = row + col - tp;
            iou.push((union > 0).then(|| tp as f64 / union as f64));
        }
        let present: Vec<f64> = iou.iter().flatten().copied().collect();
        let miou = present.iter().sum::<f64>() / present.len() as f64;
        let oa = trace as f64 / nf;
        let kappa = if pe >= 1.0 {
            if trace == n {
                1.0
            } else {
                0.0
            }
        } else {
            (oa - pe) / (1.0 - pe)
        };
        Ok(Summary { iou, miou, oa, kappa })
    }
}

/// Scores derived from a confusion matrix. `iou[k]` is `None` when class
/// `k` appears neither in labels nor predictions; such classes do not
/// enter `miou`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Summary {
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub oa: f64,
    pub kappa: f64,
}

impl Summary {
    /// mIoU in percentage points.
    pub fn miou_points(&self) -> f64 {
        self.miou * 100.0
    }

    pub fn to_text(&self, class_names: &[String]) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "{:<12} {:>8}", "class", "IoU");
        for (i, v) in self.iou.iter().enumerate() {
            let name = class_names.get(i).cloned().unwrap_or_else(|| format!("class{i}"));
            match v {
                Some(v) => {
                    let _ = writeln!(out, "{name:<12} {:>8.2}", v * 100.0);
                }
                None => {
                    let _ = writeln!(out, "{name:<12} {:>8}", "absent");
                }
            }
        }
        let _ = writeln!(out, "mIoU  {:.2}", self.miou * 100.0);
        let _ = writeln!(out, "OA    {:.2}", self.oa * 100.0);
        let _ = writeln!(out, "Kappa {:.2}", self.kappa * 100.0);
        out
    }

    pub fn csv_header(k: usize) -> String {
        let mut h = String::from("model,seed,miou,oa,kappa");
        for i in 0..k {
            let _ = write!(h, ",iou_{i}");
        }
        h
    }

    /// One CSV row; scores in percentage points, absent classes left empty.
    pub fn csv_row(&self, model: &str, seed: u64) -> String {
        let mut row = format!(
            "{model},{seed},{:.4},{:.4},{:.4}",
            self.miou * 100.0,
            self.oa * 100.0,
            self.kappa * 100.0
        );
        for v in &self.iou {
            match v {
                Some(v) => {
                    let _ = write!(row, ",{:.4}", v * 100.0);
                }
                None => row.push(','),
            }
        }
        row
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn hand_counted_update() {
        let mut cm = ConfusionMatrix::new(2);
        cm.update(&[0, 1, 1, 1], &[0, 0, 1, 1], 2, 255).unwrap();
        assert_eq!(cm, ConfusionMatrix::from_counts(2, vec![1, 1, 0, 2]).unwrap());
    }

    #[test]
    fn perfect_and_ignored() {
        let mut cm = ConfusionMatrix::new(3);
        let l = [0, 1, 2, 2, 1, 0];
        cm.update(&l, &l, 3, 255).unwrap();
        assert_eq!((0..3).map(|c| cm.get(c, c)).sum::<u64>(), 6);
        let s = cm.summary().unwrap();
        assert_eq!((s.miou, s.oa, s.kappa), (1.0, 1.0, 1.0));
        let before = cm.clone();
        cm.update(&[0, 1], &[255, 255], 2, 255).unwrap();
        assert_eq!(cm, before);
    }

    #[test]
    fn hand_computed_scores() {
        let cm = ConfusionMatrix::from_counts(2, vec![40, 10, 5, 45]).unwrap();
        let s = cm.summary().unwrap();
        assert!((s.oa - 0.85).abs() < 1e-12);
        assert!((s.kappa - 0.70).abs() < 1e-12);
        assert!((s.iou[0].unwrap() - 40.0 / 55.0).abs() < 1e-12);
        assert!((s.iou[1].unwrap() - 0.75).abs() < 1e-12);
        assert!((s.miou - 0.738636).abs() < 1e-6);
    }

    #[test]
    fn absent_class_excluded() {
        let mut cm = ConfusionMatrix::new(3);
        cm.update(&[0, 1, 1], &[0, 1, 0], 3, 255).unwrap();
        let s = cm.summary().unwrap();
        assert_eq!(s.iou[2], None);
        assert!((s.miou - (0.5 + 0.5) / 2.0).abs() < 1e-12);
    }

    #[test]
    fn errors() {
        assert!(matches!(ConfusionMatrix::new(2).summary(), Err(Error::EmptyEvaluation)));
        let err = ConfusionMatrix::new(2).update(&[0, 0, 0, 3], &[0, 0, 0, 0], 2, 255).unwrap_err();
        assert!(matches!(err, Error::Data { row: 1, col: 1, .. }));
    }

    #[test]
    fn degenerate_kappa() {
        let single = ConfusionMatrix::from_counts(2, vec![5, 0, 0, 0]).unwrap();
        assert_eq!(single.summary().unwrap().kappa, 1.0);
    }

    #[test]
    fn report_formats() {
        let cm = ConfusionMatrix::from_counts(3, vec![40, 10, 0, 5, 45, 0, 0, 0, 0]).unwrap();
        let s = cm.summary().unwrap();
        assert_eq!(Summary::csv_header(3), "model,seed,miou,oa,kappa,iou_0,iou_1,iou_2");
        assert_eq!(s.csv_row("m", 1), "m,1,73.8636,85.0000,70.0000,72.7273,75.0000,");
        let text = s.to_text(&["a".into(), "b".into(), "c".into()]);
        assert!(text.contains("absent") && text.contains("mIoU  73.86"));
    }

    /// Scores straight from pixel pairs, no matrix.
    fn oracle(pred: &[u8], label: &[u8], k: usize) -> (Vec<Option<f64>>, f64, f64) {
        let n = pred.len() as f64;
        let oa = pred.iter().zip(label).filter(|(p, l)| p == l).count() as f64 / n;
        let iou = (0..k as u8)
            .map(|c| {
                let inter = pred.iter().zip(label).filter(|&(&p, &l)| p == c && l == c).count();
                let union = pred.iter().zip(label).filter(|&(&p, &l)| p == c || l == c).count();
                (union > 0).then(|| inter as f64 / union as f64)
            })
            .collect();
        let pe: f64 = (0..k as u8)
            .map(|c| {
                let a = label.iter().filter(|&&l| l == c).count() as f64 / n;
                let b = pred.iter().filter(|&&p| p == c).count() as f64 / n;
                a * b
            })
            .sum();
        let kappa = if pe >= 1.0 { if oa == 1.0 { 1.0 } else { 0.0 } } else { (oa - pe) / (1.0 - pe) };
        (iou, oa, kappa)
    }

    fn instance() -> impl Strategy<Value = (usize, Vec<(u8, u8)>)> {
        (2usize..6).prop_flat_map(|k| (Just(k), proptest::collection::vec((0..k as u8, 0..k as u8), 1..80)))
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(100))]

        #[test]
        fn agrees_with_pixel_oracle((k, pairs) in instance()) {
            let (pred, label): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let mut cm = ConfusionMatrix::new(k);
            cm.update(&pred, &label, pred.len(), 255).unwrap();
            let s = cm.summary().unwrap();
            let (iou, oa, kappa) = oracle(&pred, &label, k);
            prop_assert!((s.oa - oa).abs() <= 1e-12);
            prop_assert!((s.kappa - kappa).abs() <= 1e-12);
            for (a, b) in s.iou.iter().zip(&iou) {
                match (a, b) {
                    (Some(a), Some(b)) => prop_assert!((a - b).abs() <= 1e-12),
                    (None, None) => {}
                    _ => prop_assert!(false, "presence differs"),
                }
            }
            prop_assert!((0.0..=1.0).contains(&s.oa));
            prop_assert!((-1.0..=1.0).contains(&s.kappa));
            prop_assert!(s.iou.iter().flatten().all(|v| (0.0..=1.0).contains(v)));
        }

        #[test]
        fn merge_equals_joint((k, pairs) in instance(), split in 0usize..80) {
            let (pred, label): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let cut = split.min(pred.len());
            let mut a = ConfusionMatrix::new(k);
            a.update(&pred[..cut], &label[..cut], 1, 255).unwrap();
            let mut b = ConfusionMatrix::new(k);
            b.update(&pred[cut..], &label[cut..], 1, 255).unwrap();
            let mut joint = ConfusionMatrix::new(k);
            joint.update(&pred, &label, 1, 255).unwrap();
            let mut ab = a.clone();
            ab.merge(&b).unwrap();
            let mut ba = b;
            ba.merge(&a).unwrap();
            prop_assert_eq!(&ab, &joint);
            prop_assert_eq!(&ba, &joint);
            prop_assert_eq!(ab.summary().unwrap(), joint.summary().unwrap());
        }

        #[test]
        fn permuting_classes_permutes_iou((k, pairs) in instance(), shift in 1usize..5) {
            let (pred, label): (Vec<u8>, Vec<u8>) = pairs.into_iter().unzip();
            let perm = |v: &[u8]| v.iter().map(|&c| ((c as usize + shift) % k) as u8).collect::<Vec<_>>();
            let mut a = ConfusionMatrix::new(k);
            a.update(&pred, &label, 1, 255).unwrap();
            let mut b = ConfusionMatrix::new(k);
            b.update(&perm(&pred), &perm(&label), 1, 255).unwrap();
            let (sa, sb) = (a.summary().unwrap(), b.summary().unwrap());
            prop_assert!((sa.miou - sb.miou).abs() < 1e-12);
            prop_assert!((sa.oa - sb.oa).abs() < 1e-12);
            prop_assert!((sa.kappa - sb.kappa).abs() < 1e-12);
            for c in 0..k {
                prop_assert_eq!(sa.iou[c], sb.iou[(c + shift) % k]);
            }
        }
    }
}
