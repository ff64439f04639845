use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{fid, kid, l1, psnr, ssim, tv, FeatureExtractor};
use crate::data::io::read_image;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const METRIC_CSV_HEADER: &str = "method,l1_pct,fid,kid,tv_pct,psnr,ssim_pct";

/// Per-pair metrics; TV is that of the restored image.
#[derive(Clone, Debug, PartialEq)]
pub struct PairMetrics {
    pub name: String,
    pub l1: f64,
    pub tv: f64,
    pub psnr: f64,
    pub ssim: f64,
}

impl PairMetrics {
    pub fn compute(
        name: impl Into<String>,
        restored: &Tensor<f32>,
        truth: &Tensor<f32>,
    ) -> Result<Self> {
        Ok(PairMetrics {
            name: name.into(),
            l1: l1(restored, truth)?,
            tv: tv(restored)?,
            psnr: psnr(restored, truth, 1.0)?,
            ssim: ssim(restored, truth, 1.0)?,
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct MetricReport {
    pub method: String,
    pub l1: f64,
    pub fid: f64,
    pub kid: f64,
    pub tv: f64,
    pub psnr: f64,
    pub ssim: f64,
    pub count: usize,
}

impl MetricReport {
    /// Averages the per-pair metrics; FID and KID are supplied separately
    /// since they are set-level.
    pub fn from_pairs(method: &str, pairs: &[PairMetrics], fid: f64, kid: f64) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::shape("metric report over zero pairs"));
        }
        let n = pairs.len() as f64;
        let avg = |f: fn(&PairMetrics) -> f64| pairs.iter().map(f).sum::<f64>() / n;
        Ok(MetricReport {
            method: method.to_string(),
            l1: avg(|p| p.l1),
            fid,
            kid,
            tv: avg(|p| p.tv),
            psnr: avg(|p| p.psnr),
            ssim: avg(|p| p.ssim),
            count: pairs.len(),
        })
    }

    pub fn csv_row(&self) -> String {
        format!(
            "{},{:.6},{:.6},{:.6},{:.6},{:.6},{:.6}",
            self.method,
            100.0 * self.l1,
            self.fid,
            self.kid,
            100.0 * self.tv,
            self.psnr,
            100.0 * self.ssim
        )
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MetricReport,
    pub pairs: Vec<PairMetrics>,
}

/// Evaluates `(name, restored, ground truth)` triples.
pub fn evaluate_pairs(
    method: &str,
    pairs: &[(String, Tensor<f32>, Tensor<f32>)],
    features: &FeatureExtractor,
) -> Result<Evaluation> {
    if pairs.len() < 2 {
        return Err(Error::shape(format!(
            "evaluation needs at least 2 pairs, got {}",
            pairs.len()
        )));
    }
    let per_pair = pairs
        .iter()
        .map(|(name, r, g)| PairMetrics::compute(name.clone(), r, g))
        .collect::<Result<Vec<_>>>()?;
    let fr = pairs
        .iter()
        .map(|(_, r, _)| features.extract(r))
        .collect::<Result<Vec<_>>>()?;
    let fg = pairs
        .iter()
        .map(|(_, _, g)| features.extract(g))
        .collect::<Result<Vec<_>>>()?;
    let report = MetricReport::from_pairs(method, &per_pair, fid(&fr, &fg)?, kid(&fr, &fg)?)?;
    Ok(Evaluation {
        report,
        pairs: per_pair,
    })
}

fn is_image(p: &Path) -> bool {
    p.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| ["png", "ppm"].iter().any(|x| e.eq_ignore_ascii_case(x)))
}

/// Pairs every image in `gt_dir` with the same file name in
/// `restored_dir`, in sorted name order.
pub fn evaluate_dir(
    method: &str,
    restored_dir: &Path,
    gt_dir: &Path,
    features: &FeatureExtractor,
) -> Result<Evaluation> {
    let mut names: Vec<PathBuf> = fs::read_dir(gt_dir)
        .map_err(|e| Error::io(gt_dir, e))?
        .map(|e| e.map(|e| e.path()).map_err(|err| Error::io(gt_dir, err)))
        .collect::<Result<Vec<_>>>()?;
    names.retain(|p| p.is_file() && is_image(p));
    names.sort();
    let pairs = names
        .iter()
        .map(|gt| {
            let name = gt
                .file_name()
                .expect("listed file")
                .to_string_lossy()
                .into_owned();
            let restored = restored_dir.join(&name);
            if !restored.is_file() {
                return Err(Error::Format(format!(
                    "{}: missing restored image for {}",
                    restored.display(),
                    gt.display()
                )));
            }
            Ok((name, read_image(&restored)?, read_image(gt)?))
        })
        .collect::<Result<Vec<_>>>()?;
    evaluate_pairs(method, &pairs, features)
}

pub fn write_report(path: &Path, reports: &[MetricReport]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "{METRIC_CSV_HEADER}").map_err(|e| Error::io(path, e))?;
    for r in reports {
        writeln!(f, "{}", r.csv_row()).map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

pub fn write_pair_metrics(path: &Path, pairs: &[PairMetrics]) -> Result<()> {
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    writeln!(f, "name,l1,tv,psnr,ssim").map_err(|e| Error::io(path, e))?;
    for p in pairs {
        writeln!(
            f,
            "{},{:e},{:e},{:e},{:e}",
            p.name, p.l1, p.tv, p.psnr, p.ssim
        )
        .map_err(|e| Error::io(path, e))?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::io::write_image;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn image(seed: u64) -> Tensor<f32> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Tensor::from_fn(&[3, 16, 16], |_| rng.gen())
    }

    #[test]
    fn identical_pairs() {
        let pairs: Vec<_> = (0..4)
            .map(|i| (format!("{i}"), image(i), image(i)))
            .collect();
        let ev = evaluate_pairs("id", &pairs, &FeatureExtractor::default()).unwrap();
        let r = &ev.report;
        assert_eq!((r.l1, r.psnr, r.count), (0.0, 99.0, 4));
        assert!((r.ssim - 1.0).abs() < 1e-12);
        assert!(r.fid.abs() < 1e-6, "{}", r.fid);
        // the unbiased estimator drops within-set diagonals but not cross
        // ones, so on identical sets it is ‖Σφ‖²/n² − mean‖φ‖² scaled, ≤ 0
        assert!(r.kid <= 1e-12, "{}", r.kid);
        assert_eq!(ev.pairs.len(), 4);
    }

    #[test]
    fn dropping_a_pair_is_linear() {
        let pairs: Vec<_> = (0..5)
            .map(|i| (format!("{i}"), image(i), image(i + 10)))
            .collect();
        let fx = FeatureExtractor::default();
        let full = evaluate_pairs("m", &pairs, &fx).unwrap();
        let part = evaluate_pairs("m", &pairs[1..], &fx).unwrap();
        let p0 = &full.pairs[0];
        let expect = |all: f64, one: f64| (5.0 * all - one) / 4.0;
        assert!((part.report.l1 - expect(full.report.l1, p0.l1)).abs() < 1e-12);
        assert!((part.report.psnr - expect(full.report.psnr, p0.psnr)).abs() < 1e-9);
        assert!((part.report.ssim - expect(full.report.ssim, p0.ssim)).abs() < 1e-12);
        assert_eq!(part.pairs, full.pairs[1..]);
    }

    #[test]
    fn csv_row_scales_percentages() {
        let r = MetricReport {
            method: "x".into(),
            l1: 0.05,
            fid: 1.5,
            kid: 0.25,
            tv: 0.125,
            psnr: 20.0,
            ssim: 0.5,
            count: 2,
        };
        assert_eq!(
            r.csv_row(),
            "x,5.000000,1.500000,0.250000,12.500000,20.000000,50.000000"
        );
    }

    #[test]
    fn directory_evaluation() {
        let dir = tempfile::tempdir().unwrap();
        let (rd, gd) = (dir.path().join("r"), dir.path().join("g"));
        fs::create_dir_all(&rd).unwrap();
        fs::create_dir_all(&gd).unwrap();
        for i in 0..3 {
            write_image(&gd.join(format!("{i}.png")), &image(i)).unwrap();
            write_image(&rd.join(format!("{i}.png")), &image(i)).unwrap();
        }
        let ev = evaluate_dir("m", &rd, &gd, &FeatureExtractor::default()).unwrap();
        assert_eq!(ev.report.count, 3);
        assert_eq!(ev.report.l1, 0.0);
        fs::remove_file(rd.join("1.png")).unwrap();
        let err = evaluate_dir("m", &rd, &gd, &FeatureExtractor::default()).unwrap_err();
        assert!(err.to_string().contains("1.png"));
        let report = dir.path().join("report.csv");
        write_report(&report, &[ev.report]).unwrap();
        let text = fs::read_to_string(report).unwrap();
        assert_eq!(text.lines().next().unwrap(), METRIC_CSV_HEADER);
        assert_eq!(text.lines().count(), 2);
    }
}
