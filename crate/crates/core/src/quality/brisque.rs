//! BRISQUE natural-scene-statistics features and the SVR used to score them.

use std::fs;
use std::path::Path;
use std::sync::LazyLock;

use serde::Serialize;

use super::mscn::{mscn, MscnField, DEFAULT_STABILIZER};
use super::nss::{fit_aggd, fit_ggd};
use super::plane::LumaPlane;
use super::{Metric, QualityError, QualityScore};

pub const FEATURE_LEN: usize = 36;
const PER_SCALE: usize = FEATURE_LEN / 2;

/// Smallest edge accepted by [`brisque_features`]; the second scale is half of it.
pub const MIN_FEATURE_EDGE: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BrisqueFeatures(#[serde(with = "feature_array")] pub [f64; FEATURE_LEN]);

mod feature_array {
    use serde::Serializer;

    pub fn serialize<S: Serializer>(v: &[f64; super::FEATURE_LEN], s: S) -> Result<S::Ok, S::Error> {
        s.collect_seq(v.iter())
    }
}

impl BrisqueFeatures {
    pub fn values(&self) -> &[f64; FEATURE_LEN] {
        &self.0
    }
}

/// Neighbour offsets for the horizontal, vertical and two diagonal products.
const ORIENTATIONS: [((usize, usize), (usize, usize)); 4] =
    [((0, 0), (1, 0)), ((0, 0), (0, 1)), ((0, 0), (1, 1)), ((1, 0), (0, 1))];

fn pairwise_products(field: &MscnField, a: (usize, usize), b: (usize, usize)) -> Vec<f64> {
    let w = field.width - a.0.max(b.0);
    let h = field.height - a.1.max(b.1);
    let mut out = Vec::with_capacity(w * h);
    for y in 0..h {
        for x in 0..w {
            out.push(field.get(x + a.0, y + a.1) * field.get(x + b.0, y + b.1));
        }
    }
    out
}

fn scale_features(plane: &LumaPlane, out: &mut [f64]) -> Result<(), QualityError> {
    let field = mscn(plane, DEFAULT_STABILIZER)?;
    let ggd = fit_ggd(&field.coefficients)?;
    out[0] = ggd.alpha;
    out[1] = ggd.sigma2;
    for (i, (a, b)) in ORIENTATIONS.iter().enumerate() {
        let fit = fit_aggd(&pairwise_products(&field, *a, *b))?;
        let base = 2 + 4 * i;
        out[base] = fit.alpha;
        out[base + 1] = fit.mean_offset;
        out[base + 2] = fit.sigma_l * fit.sigma_l;
        out[base + 3] = fit.sigma_r * fit.sigma_r;
    }
    Ok(())
}

/// 18 features at full resolution followed by 18 at half resolution.
pub fn brisque_features(image: &LumaPlane) -> Result<BrisqueFeatures, QualityError> {
    if image.width() < MIN_FEATURE_EDGE || image.height() < MIN_FEATURE_EDGE {
        return Err(QualityError::Degenerate(format!(
            "BRISQUE needs at least {MIN_FEATURE_EDGE}x{MIN_FEATURE_EDGE}, got {}x{}",
            image.width(),
            image.height()
        )));
    }
    let mut values = [0.0; FEATURE_LEN];
    scale_features(image, &mut values[..PER_SCALE])?;
    scale_features(&image.downsample2()?, &mut values[PER_SCALE..])?;
    if values.iter().any(|v| !v.is_finite()) {
        return Err(QualityError::Degenerate("non-finite BRISQUE feature".into()));
    }
    Ok(BrisqueFeatures(values))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Kernel {
    Rbf,
    Linear,
}

/// Epsilon-SVR decision function with libsvm-style min-max feature scaling.
#[derive(Debug, Clone, PartialEq)]
pub struct SvrModel {
    pub kernel: Kernel,
    pub gamma: f64,
    pub rho: f64,
    pub support_vectors: Vec<[f64; FEATURE_LEN]>,
    pub dual_coefficients: Vec<f64>,
    pub feature_min: [f64; FEATURE_LEN],
    pub feature_max: [f64; FEATURE_LEN],
}

fn parse_floats(line_no: usize, tokens: &[&str]) -> Result<Vec<f64>, QualityError> {
    tokens
        .iter()
        .map(|t| t.parse::<f64>().map_err(|_| QualityError::ModelLoad(format!("line {line_no}: bad float {t:?}"))))
        .collect()
}

fn to_array(line_no: usize, v: Vec<f64>) -> Result<[f64; FEATURE_LEN], QualityError> {
    <[f64; FEATURE_LEN]>::try_from(v)
        .map_err(|v| QualityError::ModelLoad(format!("line {line_no}: expected {FEATURE_LEN} values, got {}", v.len())))
}

static BUILTIN: LazyLock<SvrModel> =
    LazyLock::new(|| SvrModel::parse(include_str!("../../models/brisque_live.svr")).expect("bundled model parses"));

impl SvrModel {
    /// Regressor trained on the LIVE IQA database (770 support vectors).
    pub fn builtin() -> &'static SvrModel {
        &BUILTIN
    }

    pub fn load(path: &Path) -> Result<Self, QualityError> {
        let text = fs::read_to_string(path).map_err(|e| QualityError::ModelLoad(format!("{}: {e}", path.display())))?;
        Self::parse(&text)
    }

    /// Header keys (`kernel`, `gamma`, `rho`, `nsv`, `scale_min`, `scale_max`)
    /// followed by `nsv` lines of `<coef> <36 floats>`.
    pub fn parse(text: &str) -> Result<Self, QualityError> {
        let mut kernel = None;
        let mut gamma = None;
        let mut rho = None;
        let mut nsv = None;
        let mut feature_min = None;
        let mut feature_max = None;
        let mut support_vectors = Vec::new();
        let mut dual_coefficients = Vec::new();

        for (i, line) in text.lines().enumerate() {
            let line_no = i + 1;
            let tokens: Vec<&str> = line.split_whitespace().collect();
            let Some((&head, rest)) = tokens.split_first() else {
                continue;
            };
            let missing = |what: &str| QualityError::ModelLoad(format!("line {line_no}: missing {what}"));
            match head {
                "kernel" => {
                    kernel = Some(match rest.first().copied() {
                        Some("rbf") => Kernel::Rbf,
                        Some("linear") => Kernel::Linear,
                        other => {
                            return Err(QualityError::ModelLoad(format!("line {line_no}: unknown kernel {other:?}")))
                        }
                    })
                }
                "gamma" => gamma = Some(*parse_floats(line_no, rest)?.first().ok_or_else(|| missing("gamma"))?),
                "rho" => rho = Some(*parse_floats(line_no, rest)?.first().ok_or_else(|| missing("rho"))?),
                "nsv" => {
                    let v = rest.first().ok_or_else(|| missing("nsv"))?;
                    nsv = Some(
                        v.parse::<usize>()
                            .map_err(|_| QualityError::ModelLoad(format!("line {line_no}: bad nsv {v:?}")))?,
                    )
                }
                "scale_min" => feature_min = Some(to_array(line_no, parse_floats(line_no, rest)?)?),
                "scale_max" => feature_max = Some(to_array(line_no, parse_floats(line_no, rest)?)?),
                _ => {
                    let mut values = parse_floats(line_no, &tokens)?;
                    if values.len() != FEATURE_LEN + 1 {
                        return Err(QualityError::ModelLoad(format!(
                            "line {line_no}: support vector line needs {} values, got {}",
                            FEATURE_LEN + 1,
                            values.len()
                        )));
                    }
                    let coef = values.remove(0);
                    dual_coefficients.push(coef);
                    support_vectors.push(to_array(line_no, values)?);
                }
            }
        }

        let need = |what: &str| QualityError::ModelLoad(format!("missing header `{what}`"));
        let model = Self {
            kernel: kernel.ok_or_else(|| need("kernel"))?,
            gamma: gamma.ok_or_else(|| need("gamma"))?,
            rho: rho.ok_or_else(|| need("rho"))?,
            support_vectors,
            dual_coefficients,
            feature_min: feature_min.ok_or_else(|| need("scale_min"))?,
            feature_max: feature_max.ok_or_else(|| need("scale_max"))?,
        };
        let nsv = nsv.ok_or_else(|| need("nsv"))?;
        if nsv != model.support_vectors.len() {
            return Err(QualityError::ModelLoad(format!(
                "nsv {nsv} but {} support vector lines",
                model.support_vectors.len()
            )));
        }
        Ok(model)
    }

    /// Maps each feature to `[-1, 1]`; a zero-width range maps to 0.
    pub fn scale(&self, features: &BrisqueFeatures) -> [f64; FEATURE_LEN] {
        let mut out = [0.0; FEATURE_LEN];
        for (i, o) in out.iter_mut().enumerate() {
            let (lo, hi) = (self.feature_min[i], self.feature_max[i]);
            *o = if hi > lo { -1.0 + 2.0 * (features.0[i] - lo) / (hi - lo) } else { 0.0 };
        }
        out
    }

    fn kernel_value(&self, a: &[f64; FEATURE_LEN], b: &[f64; FEATURE_LEN]) -> f64 {
        match self.kernel {
            Kernel::Linear => a.iter().zip(b).map(|(x, y)| x * y).sum(),
            Kernel::Rbf => {
                let d2: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum();
                (-self.gamma * d2).exp()
            }
        }
    }

    pub fn decision(&self, features: &BrisqueFeatures) -> f64 {
        let f = self.scale(features);
        let sum: f64 =
            self.support_vectors.iter().zip(&self.dual_coefficients).map(|(sv, c)| c * self.kernel_value(sv, &f)).sum();
        sum - self.rho
    }
}

/// Lower is better.
pub fn brisque_score(features: &BrisqueFeatures, model: &SvrModel) -> QualityScore {
    QualityScore::new(Metric::Brisque, model.decision(features))
}
