//! End-point error and the KITTI outlier rates over background, foreground and all
//! pixels, for non-occluded and all regions.

use crate::error::{Error, Result};
use crate::flow::FlowField;

/// Outlier threshold in pixels.
pub const OUTLIER_PX: f64 = 3.0;
/// Outlier threshold relative to the ground-truth magnitude.
pub const OUTLIER_REL: f64 = 0.05;

#[derive(Clone, Debug, PartialEq)]
pub struct EvalMasks {
    pub height: usize,
    pub width: usize,
    pub valid: Vec<bool>,
    pub noc: Vec<bool>,
    pub fg: Vec<bool>,
}

impl EvalMasks {
    /// Fails unless `noc` and `fg` are subsets of `valid`.
    pub fn new(height: usize, width: usize, valid: Vec<bool>, noc: Vec<bool>, fg: Vec<bool>) -> Result<Self> {
        let n = height * width;
        if valid.len() != n || noc.len() != n || fg.len() != n {
            return Err(Error::Shape(format!("masks must have {n} entries")));
        }
        let subset = |m: &[bool]| m.iter().zip(&valid).all(|(a, v)| !*a || *v);
        if !subset(&noc) || !subset(&fg) {
            return Err(Error::Shape("noc and fg masks must lie inside the valid mask".into()));
        }
        Ok(Self {
            height,
            width,
            valid,
            noc,
            fg,
        })
    }

    /// Masks for a ground-truth field; missing `noc` means every valid pixel, missing
    /// `fg` means no foreground. Both are clipped to the valid pixels.
    pub fn for_gt(gt: &FlowField, noc: Option<Vec<bool>>, fg: Option<Vec<bool>>) -> Result<Self> {
        let valid = gt.valid_vec();
        let n = valid.len();
        let clip = |m: Option<Vec<bool>>, default: bool| -> Result<Vec<bool>> {
            let m = m.unwrap_or_else(|| vec![default; n]);
            if m.len() != n {
                return Err(Error::Shape(format!("mask has {} entries, expected {n}", m.len())));
            }
            Ok(m.iter().zip(&valid).map(|(a, v)| *a && *v).collect())
        };
        let (noc, fg) = (clip(noc, true)?, clip(fg, false)?);
        Self::new(gt.height(), gt.width(), valid, noc, fg)
    }

    pub fn mirrored(&self) -> Self {
        let flip = |m: &[bool]| -> Vec<bool> {
            m.chunks_exact(self.width)
                .flat_map(|r| r.iter().rev().copied())
                .collect()
        };
        Self {
            height: self.height,
            width: self.width,
            valid: flip(&self.valid),
            noc: flip(&self.noc),
            fg: flip(&self.fg),
        }
    }
}

fn check_dims(pred: &FlowField, gt: &FlowField, valid: &[bool]) -> Result<()> {
    if pred.dims() != gt.dims() || valid.len() != gt.height() * gt.width() {
        return Err(Error::Shape(format!(
            "prediction {}x{} vs ground truth {}x{}",
            pred.height(),
            pred.width(),
            gt.height(),
            gt.width()
        )));
    }
    Ok(())
}

/// Per-pixel end-point error (0 at invalid pixels) and its mean over valid pixels.
pub fn epe_map(pred: &FlowField, gt: &FlowField, valid: &[bool]) -> Result<(Vec<f64>, f64)> {
    check_dims(pred, gt, valid)?;
    let w = gt.width();
    let mut sum = 0.0;
    let mut count = 0usize;
    let map = valid
        .iter()
        .enumerate()
        .map(|(i, &ok)| {
            if !ok {
                return 0.0;
            }
            let ([pu, pv], [gu, gv]) = (pred.get(i / w, i % w), gt.get(i / w, i % w));
            let e = (pu as f64 - gu as f64).hypot(pv as f64 - gv as f64);
            sum += e;
            count += 1;
            e
        })
        .collect();
    if count == 0 {
        return Err(Error::Degenerate("no valid pixels for EPE".into()));
    }
    Ok((map, sum / count as f64))
}

/// True iff the pixel is valid and its error reaches both 3 px and 5% of ‖gt‖.
pub fn is_outlier(epe: f64, gt_magnitude: f64) -> bool {
    epe >= OUTLIER_PX && epe >= OUTLIER_REL * gt_magnitude
}

pub fn outlier_mask(epe: &[f64], gt: &FlowField, valid: &[bool]) -> Result<Vec<bool>> {
    if epe.len() != valid.len() || valid.len() != gt.height() * gt.width() {
        return Err(Error::Shape("EPE map, ground truth and mask differ in size".into()));
    }
    let w = gt.width();
    Ok(valid
        .iter()
        .enumerate()
        .map(|(i, &ok)| {
            let [u, v] = gt.get(i / w, i % w);
            ok && is_outlier(epe[i], (u as f64).hypot(v as f64))
        })
        .collect())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Region {
    Background,
    Foreground,
    All,
}

impl Region {
    pub const ALL: [Region; 3] = [Region::Background, Region::Foreground, Region::All];

    pub fn label(self) -> &'static str {
        match self {
            Region::Background => "Fl-BG",
            Region::Foreground => "Fl-FG",
            Region::All => "Fl-ALL",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Occlusion {
    /// Non-occluded pixels only.
    Noc,
    /// Every ground-truth pixel.
    Occ,
}

impl Occlusion {
    pub const ALL: [Occlusion; 2] = [Occlusion::Noc, Occlusion::Occ];

    pub fn label(self) -> &'static str {
        match self {
            Occlusion::Noc => "Noc",
            Occlusion::Occ => "Occ",
        }
    }
}

/// Outlier and pixel counts per bucket, plus the EPE sum; accumulates over frames.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct EvalReport {
    /// Indexed [occlusion][region].
    pub outliers: [[usize; 3]; 2],
    pub pixels: [[usize; 3]; 2],
    pub epe_sum: f64,
    pub epe_pixels: usize,
}

impl EvalReport {
    /// Mean EPE over valid pixels, `None` when there were none.
    pub fn epe_mean(&self) -> Option<f64> {
        (self.epe_pixels > 0).then(|| self.epe_sum / self.epe_pixels as f64)
    }

    /// Outlier percentage of a bucket, `None` for an empty bucket.
    pub fn fl(&self, region: Region, occ: Occlusion) -> Option<f64> {
        let (o, r) = (occ as usize, region as usize);
        let n = self.pixels[o][r];
        (n > 0).then(|| 100.0 * self.outliers[o][r] as f64 / n as f64)
    }

    pub fn merge(&mut self, other: &EvalReport) {
        for o in 0..2 {
            for r in 0..3 {
                self.outliers[o][r] += other.outliers[o][r];
                self.pixels[o][r] += other.pixels[o][r];
            }
        }
        self.epe_sum += other.epe_sum;
        self.epe_pixels += other.epe_pixels;
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or("undefined".to_string(), |x| format!("{x:.6}"));
        let mut out = String::from("occlusion,region,outliers,pixels,fl_percent\n");
        for occ in Occlusion::ALL {
            for region in Region::ALL {
                let (o, r) = (occ as usize, region as usize);
                out.push_str(&format!(
                    "{},{},{},{},{}\n",
                    occ.label(),
                    region.label(),
                    self.outliers[o][r],
                    self.pixels[o][r],
                    fmt(self.fl(region, occ))
                ));
            }
        }
        out.push_str(&format!("all,EPE,,{},{}\n", self.epe_pixels, fmt(self.epe_mean())));
        out
    }

    /// Two rows (Noc, Occ) under Fl-BG, Fl-FG, Fl-ALL and EPE columns.
    pub fn to_table(&self) -> String {
        let cell = |v: Option<f64>| v.map_or("-".to_string(), |x| format!("{x:.2}"));
        let mut out = format!(
            "{:<5} {:>8} {:>8} {:>8} {:>8}\n",
            "", "Fl-BG", "Fl-FG", "Fl-ALL", "EPE"
        );
        for occ in Occlusion::ALL {
            let epe = if occ == Occlusion::Noc {
                cell(self.epe_mean())
            } else {
                String::new()
            };
            out.push_str(&format!(
                "{:<5} {:>8} {:>8} {:>8} {:>8}\n",
                occ.label(),
                cell(self.fl(Region::Background, occ)),
                cell(self.fl(Region::Foreground, occ)),
                cell(self.fl(Region::All, occ)),
                epe
            ));
        }
        out
    }
}

/// Buckets outliers by region and occlusion filter. EPE fields stay empty.
pub fn fl_scores(outliers: &[bool], masks: &EvalMasks) -> Result<EvalReport> {
    if outliers.len() != masks.valid.len() {
        return Err(Error::Shape("outlier mask and region masks differ in size".into()));
    }
    let mut rep = EvalReport::default();
    for i in 0..outliers.len() {
        if !masks.valid[i] {
            continue;
        }
        let region = if masks.fg[i] {
            Region::Foreground
        } else {
            Region::Background
        };
        for occ in Occlusion::ALL {
            if occ == Occlusion::Noc && !masks.noc[i] {
                continue;
            }
            for r in [region, Region::All] {
                rep.pixels[occ as usize][r as usize] += 1;
                rep.outliers[occ as usize][r as usize] += usize::from(outliers[i]);
            }
        }
    }
    Ok(rep)
}

/// EPE and outlier rates of one frame.
pub fn evaluate(pred: &FlowField, gt: &FlowField, masks: &EvalMasks) -> Result<EvalReport> {
    check_dims(pred, gt, &masks.valid)?;
    let (map, _) = epe_map(pred, gt, &masks.valid)?;
    let out = outlier_mask(&map, gt, &masks.valid)?;
    let mut rep = fl_scores(&out, masks)?;
    rep.epe_sum = masks.valid.iter().zip(&map).filter(|(v, _)| **v).map(|(_, e)| e).sum();
    rep.epe_pixels = masks.valid.iter().filter(|v| **v).count();
    Ok(rep)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn epe_examples() {
        let gt = FlowField::zeros(1, 3);
        let pred = FlowField::from_fn(1, 3, |_, x| [[0.0, 3.0, 6.0][x], [0.0, 4.0, 8.0][x]]);
        let (map, mean) = epe_map(&pred, &gt, &[true; 3]).unwrap();
        assert_eq!(map, vec![0.0, 5.0, 10.0]);
        assert_eq!(mean, 5.0);
        assert!(epe_map(&pred, &gt, &[false; 3]).is_err());
    }

    #[test]
    fn outlier_rule_examples() {
        assert!(!is_outlier(4.0, 100.0));
        assert!(is_outlier(4.0, 10.0));
        assert!(!is_outlier(2.9, 1.0));
        assert!(is_outlier(3.0, 60.0));
    }

    #[test]
    fn uniform_offset_makes_every_pixel_an_outlier() {
        let gt = FlowField::from_fn(4, 5, |_, _| [6.0, 8.0]);
        let pred = FlowField::from_fn(4, 5, |_, _| [10.0, 8.0]);
        let masks = EvalMasks::for_gt(&gt, None, None).unwrap();
        let rep = evaluate(&pred, &gt, &masks).unwrap();
        assert_eq!(rep.fl(Region::All, Occlusion::Occ), Some(100.0));
        assert_eq!(rep.fl(Region::Foreground, Occlusion::Occ), None);
        assert_eq!(rep.epe_mean(), Some(4.0));
    }

    #[test]
    fn subset_violation_rejected() {
        assert!(EvalMasks::new(1, 2, vec![true, false], vec![false, true], vec![false; 2]).is_err());
    }

    #[test]
    fn table_has_noc_and_occ_rows() {
        let gt = FlowField::zeros(2, 2);
        let rep = evaluate(&gt, &gt, &EvalMasks::for_gt(&gt, None, None).unwrap()).unwrap();
        let t = rep.to_table();
        assert!(t.contains("Noc") && t.contains("Occ") && t.contains("Fl-ALL"));
        assert!(rep.to_csv().contains("Noc,Fl-FG,0,0,undefined"));
    }
}
