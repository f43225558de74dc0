//! Lesion geometry and rasterisation.
//!
//! All transcendental functions come from `libm` so rendering is
//! bit-identical on every platform.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geometry::{BBox, Mask};
use crate::tensor::{Shape, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Label {
    Benign,
    Malignant,
}

impl Label {
    pub fn is_malignant(self) -> bool {
        self == Label::Malignant
    }
}

/// One triangular spike: its direction, how far its apex reaches past the
/// ellipse boundary, and its half-width where it leaves the boundary.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spicule {
    pub angle: f64,
    pub length: f64,
    pub half_width: f64,
}

/// Smooth radial modulation `1 + amplitude * cos(frequency * phi + phase)`
/// of the ellipse outline.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Lobe {
    pub frequency: u32,
    pub amplitude: f64,
    pub phase: f64,
}

/// Everything needed to rasterise a lesion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LesionShape {
    pub center: (f64, f64),
    pub axes: (f64, f64),
    pub rotation: f64,
    pub label: Label,
    pub spicules: Vec<Spicule>,
    #[serde(default)]
    pub lobes: Vec<Lobe>,
    /// Width (std) of the Gaussian edge feather, pixels.
    pub feather: f64,
}

impl LesionShape {
    pub fn spicule_count(&self) -> usize {
        self.spicules.len()
    }

    /// Radius of a disc around the centre that contains the lesion.
    pub fn extent(&self) -> f64 {
        let spike = self.spicules.iter().map(|s| s.length).fold(0.0, f64::max);
        let swell: f64 = self.lobes.iter().map(|l| l.amplitude.abs()).sum();
        self.axes.0.max(self.axes.1) * (1.0 + swell) + spike
    }

    fn validate(&self) -> Result<()> {
        match (self.label, self.spicules.len()) {
            (Label::Malignant, 0) => return Err(Error::config("a malignant lesion needs at least one spicule")),
            (Label::Benign, n) if n > 0 => return Err(Error::config("a benign lesion has no spicules")),
            _ => {}
        }
        let (a, b) = self.axes;
        if !(a > 0.0 && b > 0.0 && self.feather > 0.0) {
            return Err(Error::config("lesion axes and feather must be positive"));
        }
        if self.lobes.iter().map(|l| l.amplitude.abs()).sum::<f64>() >= 0.5 {
            return Err(Error::config("lobe amplitudes must sum below 0.5"));
        }
        for s in &self.spicules {
            if !(s.length > 0.0 && s.half_width > 0.0) {
                return Err(Error::config("spicule length and width must be positive"));
            }
        }
        Ok(())
    }

    /// Signed inside-ness at `(x, y)`: positive inside, zero on the outline,
    /// roughly the distance to the outline in pixels.
    pub fn score(&self, x: f64, y: f64) -> f64 {
        let (a, b) = self.axes;
        let (dx, dy) = (x - self.center.0, y - self.center.1);
        let (cr, sr) = (libm::cos(self.rotation), libm::sin(self.rotation));
        let u = cr * dx + sr * dy;
        let v = -sr * dx + cr * dy;
        let rho = libm::sqrt((u / a) * (u / a) + (v / b) * (v / b));
        let mut swell = 1.0;
        if !self.lobes.is_empty() {
            let ang = libm::atan2(v / b, u / a);
            for l in &self.lobes {
                swell += l.amplitude * libm::cos(l.frequency as f64 * ang + l.phase);
            }
        }
        let mut best = (1.0 - rho / swell) * a.min(b);
        for s in &self.spicules {
            let (ca, sa) = (libm::cos(s.angle), libm::sin(s.angle));
            let t = ca * dx + sa * dy;
            let perp = (-sa * dx + ca * dy).abs();
            // Ellipse radius along the spike direction.
            let phi = s.angle - self.rotation;
            let (cp, sp) = (libm::cos(phi), libm::sin(phi));
            let rb = 1.0 / libm::sqrt((cp / a) * (cp / a) + (sp / b) * (sp / b));
            let apex = rb + s.length;
            let spike = (s.half_width * (apex - t) / s.length - perp).min(t - 0.5 * rb);
            best = best.max(spike);
        }
        best
    }
}

/// Standard normal CDF.
fn phi(z: f64) -> f64 {
    0.5 * libm::erfc(-z / std::f64::consts::SQRT_2)
}

/// Rasterises at pixel centres. Returns the binary mask (intensity >= 0.5)
/// and the feathered intensity patch in [0, 1].
pub fn render_lesion(shape: &LesionShape, height: usize, width: usize) -> Result<(Mask, Tensor)> {
    shape.validate()?;
    let r = shape.extent();
    let (cx, cy) = shape.center;
    if cx - r < 1.0 || cy - r < 1.0 || cx + r > width as f64 - 1.0 || cy + r > height as f64 - 1.0 {
        return Err(Error::Placement(format!(
            "lesion at ({cx:.2}, {cy:.2}) with extent {r:.2} leaves the {width}x{height} canvas"
        )));
    }
    let patch = Tensor::from_fn(Shape::new(1, 1, height, width), |_, _, row, col| {
        phi(shape.score(col as f64 + 0.5, row as f64 + 0.5) / shape.feather)
    });
    let mask = Mask::from_tensor(&patch, 0.5);
    if mask.is_empty() {
        return Err(Error::Placement("lesion covers no pixel centre".into()));
    }
    Ok((mask, patch))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Lesion {
    pub shape: LesionShape,
    pub mask: Mask,
    pub bbox: BBox,
}

impl Lesion {
    pub fn label(&self) -> Label {
        self.shape.label
    }

    /// `perimeter^2 / area` of the mask, a compactness measure that grows
    /// with spiculation.
    pub fn compactness(&self) -> f64 {
        let p = self.mask.perimeter() as f64;
        p * p / self.mask.count() as f64
    }
}

/// Renders a lesion and derives its tight box. Returns the lesion and its
/// intensity patch.
pub fn build_lesion(shape: LesionShape, height: usize, width: usize) -> Result<(Lesion, Tensor)> {
    let (mask, patch) = render_lesion(&shape, height, width)?;
    let bbox = mask.tight_box().expect("mask is non-empty");
    Ok((Lesion { shape, mask, bbox }, patch))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn circle(r: f64) -> LesionShape {
        LesionShape {
            center: (32.0, 32.0),
            axes: (r, r),
            rotation: 0.0,
            label: Label::Benign,
            spicules: vec![],
            lobes: vec![],
            feather: 0.8,
        }
    }

    #[test]
    fn circle_area() {
        let (mask, patch) = render_lesion(&circle(10.0), 64, 64).unwrap();
        let area = std::f64::consts::PI * 100.0;
        assert!((mask.count() as f64 / area - 1.0).abs() < 0.05, "{}", mask.count());
        assert!(patch.data().iter().all(|v| (0.0..=1.0).contains(v)));
        assert_eq!(Mask::from_tensor(&patch, 0.5), mask);
    }

    #[test]
    fn label_spicule_invariant() {
        let mut s = circle(8.0);
        s.label = Label::Malignant;
        assert!(matches!(render_lesion(&s, 64, 64), Err(Error::Config(_))));
        s.label = Label::Benign;
        s.spicules.push(Spicule {
            angle: 0.0,
            length: 4.0,
            half_width: 1.5,
        });
        assert!(matches!(render_lesion(&s, 64, 64), Err(Error::Config(_))));
    }

    #[test]
    fn out_of_bounds_is_a_placement_error() {
        let mut s = circle(8.0);
        s.center = (4.0, 32.0);
        assert!(matches!(render_lesion(&s, 64, 64), Err(Error::Placement(_))));
    }

    #[test]
    fn spicules_add_area_and_perimeter() {
        let base = circle(8.0);
        let mut spiky = base.clone();
        spiky.label = Label::Malignant;
        spiky.spicules = (0..6)
            .map(|i| Spicule {
                angle: i as f64 * std::f64::consts::PI / 3.0,
                length: 5.0,
                half_width: 1.8,
            })
            .collect();
        let (b, _) = build_lesion(base, 64, 64).unwrap();
        let (m, _) = build_lesion(spiky, 64, 64).unwrap();
        assert!(m.mask.count() > b.mask.count());
        assert!(
            m.compactness() > b.compactness() * 1.3,
            "{} vs {}",
            m.compactness(),
            b.compactness()
        );
        assert_eq!(m.mask.intersection_count(&b.mask).unwrap(), b.mask.count());
        assert_eq!(Some(m.bbox), m.mask.tight_box());
    }

    #[test]
    fn rendering_is_repeatable() {
        let mut s = circle(7.3);
        s.axes = (9.1, 6.2);
        s.rotation = 0.7;
        let a = render_lesion(&s, 64, 64).unwrap();
        let b = render_lesion(&s.clone(), 64, 64).unwrap();
        assert_eq!(a.0, b.0);
        assert_eq!(a.1.to_record_bytes(), b.1.to_record_bytes());
    }
}
