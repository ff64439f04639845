use std::fmt;
use std::str::FromStr;

use crate::error::{Error, Result};

pub const LOSS_CSV_HEADER: &str =
    "step,cmad,isd,wpa,l1,g_adv_g,l_adv_g,g_adv_d,l_adv_d,total_g,total_d";

/// The weighted terms of the generator objective.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Component {
    Cmad,
    Isd,
    Wpa,
    Recon,
    GAdv,
    LAdv,
}

impl Component {
    pub const ALL: [Component; 6] = [
        Component::Cmad,
        Component::Isd,
        Component::Wpa,
        Component::Recon,
        Component::GAdv,
        Component::LAdv,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Component::Cmad => "cmad",
            Component::Isd => "isd",
            Component::Wpa => "wpa",
            Component::Recon => "recon",
            Component::GAdv => "g_adv",
            Component::LAdv => "l_adv",
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Component {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Component::ALL
            .into_iter()
            .find(|c| c.name() == s.trim())
            .ok_or_else(|| {
                Error::config(format!(
                    "unknown loss component {s:?} (expected one of cmad, isd, wpa, recon, g_adv, l_adv)"
                ))
            })
    }
}

/// `λ` (CMAD and ISD, with an optional separate ISD weight), `α` (WPA),
/// `β` (reconstruction), `γ` (both adversarial terms).
#[derive(Clone, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub alpha: f64,
    pub beta: f64,
    pub gamma: f64,
    pub lambda_isd: Option<f64>,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 2.0,
            alpha: 1.0,
            beta: 1.0,
            gamma: 0.1,
            lambda_isd: None,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [
            ("lambda", self.lambda),
            ("alpha", self.alpha),
            ("beta", self.beta),
            ("gamma", self.gamma),
            ("lambda_isd", self.lambda_isd.unwrap_or(0.0)),
        ];
        for (name, v) in all {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(format!(
                    "loss weight {name} must be finite and ≥ 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    pub fn terms(&self) -> TermWeights {
        TermWeights {
            cmad: self.lambda,
            isd: self.lambda_isd.unwrap_or(self.lambda),
            wpa: self.alpha,
            recon: self.beta,
            g_adv: self.gamma,
            l_adv: self.gamma,
        }
    }
}

/// Per-term multipliers actually applied, after any ablation.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TermWeights {
    pub cmad: f64,
    pub isd: f64,
    pub wpa: f64,
    pub recon: f64,
    pub g_adv: f64,
    pub l_adv: f64,
}

impl TermWeights {
    pub fn get(&self, c: Component) -> f64 {
        match c {
            Component::Cmad => self.cmad,
            Component::Isd => self.isd,
            Component::Wpa => self.wpa,
            Component::Recon => self.recon,
            Component::GAdv => self.g_adv,
            Component::LAdv => self.l_adv,
        }
    }

    /// Zeroes every listed component.
    pub fn without(mut self, drop: &[Component]) -> Self {
        for c in drop {
            match c {
                Component::Cmad => self.cmad = 0.0,
                Component::Isd => self.isd = 0.0,
                Component::Wpa => self.wpa = 0.0,
                Component::Recon => self.recon = 0.0,
                Component::GAdv => self.g_adv = 0.0,
                Component::LAdv => self.l_adv = 0.0,
            }
        }
        self
    }
}

impl From<&LossWeights> for TermWeights {
    fn from(w: &LossWeights) -> Self {
        w.terms()
    }
}

/// Scalar loss components and weighted totals of one training step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct LossRecord {
    pub cmad: f64,
    pub isd: f64,
    pub wpa: f64,
    pub l1: f64,
    pub g_adv_g: f64,
    pub l_adv_g: f64,
    pub g_adv_d: f64,
    pub l_adv_d: f64,
    pub total_g: f64,
    pub total_d: f64,
}

impl LossRecord {
    /// Fills both totals from the components.
    pub fn with_totals(mut self, w: &TermWeights) -> Result<Self> {
        self.total_g = total_g(&self, w)?;
        self.total_d = total_d(&self, w)?;
        Ok(self)
    }

    fn named_components(&self) -> [(&'static str, f64); 8] {
        [
            ("cmad", self.cmad),
            ("isd", self.isd),
            ("wpa", self.wpa),
            ("l1", self.l1),
            ("g_adv_g", self.g_adv_g),
            ("l_adv_g", self.l_adv_g),
            ("g_adv_d", self.g_adv_d),
            ("l_adv_d", self.l_adv_d),
        ]
    }

    pub fn check_finite(&self) -> Result<()> {
        for (name, v) in self.named_components() {
            if !v.is_finite() {
                return Err(Error::numeric(format!("loss component {name} is {v}")));
            }
        }
        Ok(())
    }

    /// One CSV row in [`LOSS_CSV_HEADER`] order.
    pub fn csv_row(&self, step: usize) -> String {
        let v = [
            self.cmad,
            self.isd,
            self.wpa,
            self.l1,
            self.g_adv_g,
            self.l_adv_g,
            self.g_adv_d,
            self.l_adv_d,
            self.total_g,
            self.total_d,
        ];
        let cells: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
        format!("{step},{}", cells.join(","))
    }

    pub fn parse_csv_row(line: &str) -> Result<(usize, LossRecord)> {
        let cells: Vec<&str> = line.trim().split(',').collect();
        if cells.len() != 11 {
            return Err(Error::Format(format!(
                "loss row has {} cells, expected 11",
                cells.len()
            )));
        }
        let step = cells[0]
            .parse()
            .map_err(|_| Error::Format(format!("bad step {:?}", cells[0])))?;
        let v: Vec<f64> = cells[1..]
            .iter()
            .map(|c| {
                c.parse::<f64>()
                    .map_err(|_| Error::Format(format!("bad value {c:?}")))
            })
            .collect::<Result<_>>()?;
        Ok((
            step,
            LossRecord {
                cmad: v[0],
                isd: v[1],
                wpa: v[2],
                l1: v[3],
                g_adv_g: v[4],
                l_adv_g: v[5],
                g_adv_d: v[6],
                l_adv_d: v[7],
                total_g: v[8],
                total_d: v[9],
            },
        ))
    }
}

/// `λℓ_CMAD + λℓ_ISD + αℓ_WPA + βℓ₁ + γℓ_G-adv + γℓ_L-adv`, summed left to
/// right.
pub fn total_g(r: &LossRecord, w: &TermWeights) -> Result<f64> {
    r.check_finite()?;
    Ok(w.cmad * r.cmad
        + w.isd * r.isd
        + w.wpa * r.wpa
        + w.recon * r.l1
        + w.g_adv * r.g_adv_g
        + w.l_adv * r.l_adv_g)
}

/// `γℓ_G-adv,D + γℓ_L-adv,D`; with a shared `γ` it is evaluated as
/// `γ·(g + l)`.
pub fn total_d(r: &LossRecord, w: &TermWeights) -> Result<f64> {
    r.check_finite()?;
    if w.g_adv == w.l_adv {
        Ok(w.g_adv * (r.g_adv_d + r.l_adv_d))
    } else {
        Ok(w.g_adv * r.g_adv_d + w.l_adv * r.l_adv_d)
    }
}

fn mean(v: &[f64]) -> f64 {
    v.iter().sum::<f64>() / v.len() as f64
}

/// Generator hinge term on plain scores.
pub fn hinge_g_values(fake: &[f64]) -> Result<f64> {
    if fake.is_empty() {
        return Err(Error::shape("hinge_g on an empty batch"));
    }
    Ok(-mean(fake))
}

/// Discriminator hinge term on plain scores.
pub fn hinge_d_values(real: &[f64], fake: &[f64]) -> Result<f64> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::shape("hinge_d on an empty batch"));
    }
    let r: Vec<f64> = real.iter().map(|x| (1.0 - x).max(0.0)).collect();
    let f: Vec<f64> = fake.iter().map(|x| (1.0 + x).max(0.0)).collect();
    Ok(mean(&r) + mean(&f))
}
