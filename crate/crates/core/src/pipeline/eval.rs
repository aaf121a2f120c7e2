use std::fmt::Write as _;

use super::infer::infer_prepared;
use super::setup::Setup;
use super::train::TrainData;
use crate::error::Result;
use crate::gcn::ParamStore;
use crate::losses::{metrics, Metrics};

/// Which albedo a render used.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Variant {
    Coarse,
    Refined,
}

impl Variant {
    pub fn name(self) -> &'static str {
        match self {
            Variant::Coarse => "coarse",
            Variant::Refined => "refined",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalRow {
    pub index: usize,
    pub variant: Variant,
    pub metrics: Metrics,
}

/// Published full-scale scores, listed for format parity only. They depend
/// on real face data and pretrained recognition networks and are not
/// reproduced here.
pub const REFERENCE_ROW: &str =
    "reference label=published-full-scale l1=0.034 psnr=29.69 ssim=0.894 cos_a=0.900 cos_b=0.848 reproducible=false";

/// Per-sample scores of the coarse and refined renders against the input.
#[derive(Clone, Debug, PartialEq)]
pub struct EvalReport {
    pub rows: Vec<EvalRow>,
}

impl EvalReport {
    pub fn variant(&self, v: Variant) -> impl Iterator<Item = &EvalRow> {
        self.rows.iter().filter(move |r| r.variant == v)
    }

    pub fn mean(&self, v: Variant) -> Metrics {
        let rows: Vec<&EvalRow> = self.variant(v).collect();
        let n = rows.len().max(1) as f64;
        let avg = |f: fn(&Metrics) -> f64| rows.iter().map(|r| f(&r.metrics)).sum::<f64>() / n;
        Metrics {
            l1: avg(|m| m.l1),
            psnr: avg(|m| m.psnr),
            ssim: avg(|m| m.ssim),
            cosine: avg(|m| m.cosine),
        }
    }

    /// Samples where the refined render has strictly higher PSNR than the coarse one.
    pub fn refined_psnr_wins(&self) -> usize {
        self.variant(Variant::Refined)
            .zip(self.variant(Variant::Coarse))
            .filter(|(r, c)| r.metrics.psnr > c.metrics.psnr)
            .count()
    }

    pub fn samples(&self) -> usize {
        self.variant(Variant::Refined).count()
    }

    /// Line-oriented `key=value` text. Record types, in order: one `sample`
    /// line per sample and variant, one `aggregate` line per variant (means),
    /// one `comparison` line, and the `reference` line.
    pub fn to_text(&self) -> String {
        let fmt = |m: &Metrics| format!("l1={} psnr={} ssim={} cosine={}", m.l1, m.psnr, m.ssim, m.cosine);
        let mut s = String::from("# gcnface eval v1\n");
        for r in &self.rows {
            let _ = writeln!(s, "sample index={} variant={} {}", r.index, r.variant.name(), fmt(&r.metrics));
        }
        for v in [Variant::Coarse, Variant::Refined] {
            let _ = writeln!(s, "aggregate variant={} count={} {}", v.name(), self.variant(v).count(), fmt(&self.mean(v)));
        }
        let _ = writeln!(s, "comparison refined_psnr_wins={} of={}", self.refined_psnr_wins(), self.samples());
        s.push_str(REFERENCE_ROW);
        s.push('\n');
        s
    }
}

/// Scores over the projected face region (rendered coverage intersected with
/// the face mask) for every sample.
pub fn evaluate(setup: &Setup, params: &ParamStore, data: &TrainData) -> Result<EvalReport> {
    let size = setup.image_size();
    let mut rows = Vec::new();
    for (index, (sample, prep)) in data.samples.iter().zip(&data.prepared).enumerate() {
        let out = infer_prepared(setup, params, prep)?;
        let region: Vec<bool> = out.proj_mask.iter().zip(&sample.face_mask).map(|(&a, &b)| a && b).collect();
        for (variant, image) in [(Variant::Coarse, &out.coarse_image), (Variant::Refined, &out.refined_image)] {
            rows.push(EvalRow {
                index,
                variant,
                metrics: metrics(image, &sample.image, size, Some(&region), &setup.embedder)?,
            });
        }
    }
    Ok(EvalReport { rows })
}
