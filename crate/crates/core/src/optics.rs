//! Closed-form confocal design calculator: collection bound, diffraction
//! limited resolution, excitation beam sizing and pinhole / fiber matching.
//!
//! Lengths are carried as [`Length`], stored internally in nanometres.

use serde::{Deserialize, Serialize};
use std::fmt;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OpticsError {
    #[error("numerical aperture {na} must be positive and below the immersion index {n}")]
    Aperture { na: f64, n: f64 },
    #[error("{what} must be strictly positive (got {value})")]
    NonPositive { what: &'static str, value: f64 },
    #[error("photoluminescence wavelength {pl_nm} nm is shorter than the pump wavelength {pump_nm} nm")]
    AntiStokes { pump_nm: f64, pl_nm: f64 },
}

/// A length, stored in nanometres.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize, Default)]
#[serde(transparent)]
pub struct Length(f64);

impl Length {
    pub const fn from_nm(nm: f64) -> Self {
        Length(nm)
    }
    pub fn from_um(um: f64) -> Self {
        Length(um * 1e3)
    }
    pub fn from_mm(mm: f64) -> Self {
        Length(mm * 1e6)
    }
    pub fn from_m(m: f64) -> Self {
        Length(m * 1e9)
    }
    pub fn nm(self) -> f64 {
        self.0
    }
    pub fn um(self) -> f64 {
        self.0 * 1e-3
    }
    pub fn mm(self) -> f64 {
        self.0 * 1e-6
    }
    pub fn m(self) -> f64 {
        self.0 * 1e-9
    }
}

impl fmt::Display for Length {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let nm = self.0;
        if nm.abs() >= 1e6 {
            write!(f, "{:.4} mm", self.mm())
        } else if nm.abs() >= 1e4 {
            write!(f, "{:.3} um", self.um())
        } else {
            write!(f, "{:.2} nm", nm)
        }
    }
}

/// Microscope objective.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveSpec {
    pub na: f64,
    pub n_immersion: f64,
    pub magnification: f64,
    pub tube_length: Length,
}

impl Default for ObjectiveSpec {
    fn default() -> Self {
        Self { na: 0.9, n_immersion: 1.0, magnification: 100.0, tube_length: Length::from_mm(180.0) }
    }
}

impl ObjectiveSpec {
    /// Checks the invariants shared by every calculation except
    /// [`collection_bound`], which also accepts `na == n_immersion`.
    fn check(&self, allow_hemisphere: bool) -> Result<(), OpticsError> {
        let bad = !(self.na > 0.0)
            || !(self.n_immersion > 0.0)
            || self.na > self.n_immersion
            || (!allow_hemisphere && self.na >= self.n_immersion);
        if bad {
            return Err(OpticsError::Aperture { na: self.na, n: self.n_immersion });
        }
        positive("magnification", self.magnification)?;
        positive("tube length", self.tube_length.nm())?;
        Ok(())
    }

    fn sin_theta(&self) -> f64 {
        self.na / self.n_immersion
    }

    fn cos_theta(&self) -> f64 {
        let s = self.sin_theta();
        (1.0 - s * s).max(0.0).sqrt()
    }

    fn tan_theta(&self) -> f64 {
        self.sin_theta() / self.cos_theta()
    }

    /// Effective focal length of the objective, `l_tube / M_obj`.
    pub fn focal_length(&self) -> Length {
        Length(self.tube_length.nm() / self.magnification)
    }
}

/// Detection-arm geometry of the confocal microscope.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfocalGeometry {
    pub focus_lens_focal_length: Length,
    pub pump_wavelength: Length,
    pub pl_wavelength: Length,
}

impl Default for ConfocalGeometry {
    fn default() -> Self {
        Self {
            focus_lens_focal_length: Length::from_mm(100.0),
            pump_wavelength: Length::from_nm(532.0),
            pl_wavelength: Length::from_nm(700.0),
        }
    }
}

impl ConfocalGeometry {
    fn check(&self) -> Result<(), OpticsError> {
        positive("focus lens focal length", self.focus_lens_focal_length.nm())?;
        positive("pump wavelength", self.pump_wavelength.nm())?;
        positive("PL wavelength", self.pl_wavelength.nm())?;
        if self.pl_wavelength < self.pump_wavelength {
            return Err(OpticsError::AntiStokes {
                pump_nm: self.pump_wavelength.nm(),
                pl_nm: self.pl_wavelength.nm(),
            });
        }
        Ok(())
    }
}

fn positive(what: &'static str, value: f64) -> Result<(), OpticsError> {
    if value > 0.0 && value.is_finite() {
        Ok(())
    } else {
        Err(OpticsError::NonPositive { what, value })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Resolution {
    pub r_min: Length,
    pub z_min: Length,
    pub r_airy: Length,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConfocalMatch {
    pub m_lens: f64,
    pub m_tot: f64,
    pub r_hole: Length,
    pub na_fiber: f64,
}

/// Everything the calculator derives for one objective/geometry pair.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OpticsReport {
    pub eta_bound: f64,
    pub r_min: Length,
    pub z_min: Length,
    pub beam_diameter: Length,
    pub m_lens: f64,
    pub m_tot: f64,
    pub r_hole: Length,
    pub na_fiber: f64,
    pub r_airy: Length,
}

/// Upper bound on the collected fraction of isotropic emission,
/// `(1 - cos θ) / 2` with `sin θ = NA / n`.
pub fn collection_bound(obj: &ObjectiveSpec) -> Result<f64, OpticsError> {
    obj.check(true)?;
    let s = obj.sin_theta();
    Ok(0.5 * s * s / (1.0 + obj.cos_theta()))
}

/// Rayleigh lateral resolution, axial resolution and Airy radius at `wavelength`.
pub fn resolutions(obj: &ObjectiveSpec, wavelength: Length) -> Result<Resolution, OpticsError> {
    obj.check(false)?;
    positive("wavelength", wavelength.nm())?;
    let r_min = 0.61 * wavelength.nm() / obj.na;
    let z_min = 1.4 * wavelength.nm() * obj.n_immersion / (obj.na * obj.na);
    Ok(Resolution {
        r_min: Length(r_min),
        z_min: Length(z_min),
        r_airy: Length(2.0 * r_min),
    })
}

/// Back-aperture diameter the excitation beam should fill.
pub fn excitation_beam_diameter(obj: &ObjectiveSpec) -> Result<Length, OpticsError> {
    obj.check(false)?;
    Ok(Length(2.0 * obj.focal_length().nm() * obj.tan_theta()))
}

/// Magnification up to the pinhole, matched pinhole radius and matched fiber NA.
pub fn confocal_matching(
    obj: &ObjectiveSpec,
    geo: &ConfocalGeometry,
) -> Result<ConfocalMatch, OpticsError> {
    obj.check(false)?;
    geo.check()?;
    let m_lens = geo.focus_lens_focal_length.nm() / obj.tube_length.nm();
    let m_tot = obj.magnification * m_lens;
    let r_hole = 1.22 * m_tot * geo.pl_wavelength.nm() / obj.na;
    Ok(ConfocalMatch { m_lens, m_tot, r_hole: Length(r_hole), na_fiber: obj.na / m_tot })
}

/// Full report. Resolution figures use the pump wavelength.
pub fn report(obj: &ObjectiveSpec, geo: &ConfocalGeometry) -> Result<OpticsReport, OpticsError> {
    let eta_bound = collection_bound(obj)?;
    let res = resolutions(obj, geo.pump_wavelength)?;
    let beam_diameter = excitation_beam_diameter(obj)?;
    let m = confocal_matching(obj, geo)?;
    Ok(OpticsReport {
        eta_bound,
        r_min: res.r_min,
        z_min: res.z_min,
        beam_diameter,
        m_lens: m.m_lens,
        m_tot: m.m_tot,
        r_hole: m.r_hole,
        na_fiber: m.na_fiber,
        r_airy: res.r_airy,
    })
}

impl OpticsReport {
    /// Aligned human-readable table.
    pub fn to_text(&self) -> String {
        let rows: [(&str, String); 9] = [
            ("collection bound (eta)", format!("{:.5}", self.eta_bound)),
            ("lateral resolution r_min", format!("{}", self.r_min)),
            ("axial resolution z_min", format!("{}", self.z_min)),
            ("Airy radius r_airy", format!("{}", self.r_airy)),
            ("excitation beam diameter", format!("{}", self.beam_diameter)),
            ("focus lens magnification", format!("{:.4}", self.m_lens)),
            ("total magnification M_tot", format!("{:.2}", self.m_tot)),
            ("matched pinhole radius", format!("{}", self.r_hole)),
            ("matched fiber NA", format!("{:.4}", self.na_fiber)),
        ];
        let mut out = String::new();
        for (k, v) in rows {
            out.push_str(&format!("{k:<28} {v:>14}\n"));
        }
        out.push_str(
            "note: a pinhole down to 2/3 of the matched radius sharpens r_min further at the cost of collected light\n",
        );
        out
    }

    /// Machine-readable `key=value` lines, lengths in nanometres.
    pub fn to_key_values(&self) -> String {
        format!(
            "eta_bound={}\nr_min_nm={}\nz_min_nm={}\nr_airy_nm={}\nbeam_diameter_nm={}\nm_lens={}\nm_tot={}\nr_hole_nm={}\nna_fiber={}\n",
            self.eta_bound,
            self.r_min.nm(),
            self.z_min.nm(),
            self.r_airy.nm(),
            self.beam_diameter.nm(),
            self.m_lens,
            self.m_tot,
            self.r_hole.nm(),
            self.na_fiber
        )
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn obj(na: f64, n: f64) -> ObjectiveSpec {
        ObjectiveSpec { na, n_immersion: n, magnification: 50.0, tube_length: Length::from_mm(180.0) }
    }

    #[test]
    fn hemisphere_limit_is_half() {
        assert_eq!(collection_bound(&obj(1.0, 1.0)).unwrap(), 0.5);
        assert!(excitation_beam_diameter(&obj(1.0, 1.0)).is_err());
        assert!(resolutions(&obj(1.0, 1.0), Length::from_nm(637.0)).is_err());
    }

    #[test]
    fn vanishing_aperture_collects_nothing() {
        // small-angle limit theta^2 / 4
        let eta = collection_bound(&obj(1e-4, 1.0)).unwrap();
        assert!((eta / 2.5e-9 - 1.0).abs() < 1e-6, "{eta}");
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(collection_bound(&obj(1.2, 1.0)).is_err());
        assert!(resolutions(&obj(0.9, 1.0), Length::from_nm(0.0)).is_err());
        let geo = ConfocalGeometry {
            focus_lens_focal_length: Length::from_mm(100.0),
            pump_wavelength: Length::from_nm(700.0),
            pl_wavelength: Length::from_nm(532.0),
        };
        assert!(confocal_matching(&obj(0.9, 1.0), &geo).is_err());
    }

    #[test]
    fn oil_immersion_narrows_beam() {
        let air = excitation_beam_diameter(&obj(0.5, 1.0)).unwrap();
        let oil = excitation_beam_diameter(&obj(0.5, 1.5)).unwrap();
        assert!(oil < air);
        assert!(excitation_beam_diameter(&obj(1e-9, 1.0)).unwrap().nm() < 1e-2);
    }

    #[test]
    fn doubling_na_scales_resolution() {
        let a = resolutions(&obj(0.4, 1.0), Length::from_nm(637.0)).unwrap();
        let b = resolutions(&obj(0.8, 1.0), Length::from_nm(637.0)).unwrap();
        assert!((a.r_min.nm() / b.r_min.nm() - 2.0).abs() < 1e-12);
        assert!((a.z_min.nm() / b.z_min.nm() - 4.0).abs() < 1e-12);
        assert_eq!(a.r_airy.nm(), 2.0 * a.r_min.nm());
    }
}
