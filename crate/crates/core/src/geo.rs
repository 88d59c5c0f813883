//! Distances between sampling locations and the geographically weighted
//! kernel that turns a distance into a likelihood power.

use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Mean Earth radius in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Frame {
    /// Cartesian plane, distances in the same units as the coordinates.
    #[default]
    Planar,
    /// Longitude/latitude in degrees, great-circle distances in km.
    Spherical,
}

/// A location. In the spherical frame `u` is longitude and `v` latitude.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Coordinate {
    pub u: f64,
    pub v: f64,
    pub frame: Frame,
}

impl Coordinate {
    pub fn planar(u: f64, v: f64) -> Self {
        Coordinate {
            u,
            v,
            frame: Frame::Planar,
        }
    }

    pub fn spherical(lon: f64, lat: f64) -> Result<Self> {
        let c = Coordinate {
            u: lon,
            v: lat,
            frame: Frame::Spherical,
        };
        c.validate()?;
        Ok(c)
    }

    pub fn new(u: f64, v: f64, frame: Frame) -> Result<Self> {
        let c = Coordinate { u, v, frame };
        c.validate()?;
        Ok(c)
    }

    pub fn validate(&self) -> Result<()> {
        if !self.u.is_finite() || !self.v.is_finite() {
            return Err(Error::CoordinateRange(format!(
                "non-finite coordinate ({}, {})",
                self.u, self.v
            )));
        }
        if self.frame == Frame::Spherical && (!(-180.0..=180.0).contains(&self.u) || !(-90.0..=90.0).contains(&self.v))
        {
            return Err(Error::CoordinateRange(format!(
                "longitude {} / latitude {} outside [-180, 180] x [-90, 90]",
                self.u, self.v
            )));
        }
        Ok(())
    }
}

pub fn euclidean_distance(a: &Coordinate, b: &Coordinate) -> Result<f64> {
    if a.frame != Frame::Planar || b.frame != Frame::Planar {
        return Err(Error::FrameMismatch);
    }
    Ok((a.u - b.u).hypot(a.v - b.v))
}

/// Great-circle distance between two longitude/latitude points.
pub fn haversine_distance(a: &Coordinate, b: &Coordinate, radius: f64) -> Result<f64> {
    if a.frame != Frame::Spherical || b.frame != Frame::Spherical {
        return Err(Error::FrameMismatch);
    }
    if !(radius > 0.0 && radius.is_finite()) {
        return Err(Error::InvalidParameter(format!("radius {radius} must be > 0")));
    }
    a.validate()?;
    b.validate()?;
    let (lat1, lat2) = (a.v.to_radians(), b.v.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.u - a.u).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    let h = h.clamp(0.0, 1.0);
    Ok(2.0 * radius * h.sqrt().atan2((1.0 - h).sqrt()))
}

/// Distance in whichever frame the two coordinates share.
pub fn distance(a: &Coordinate, b: &Coordinate, radius: f64) -> Result<f64> {
    match (a.frame, b.frame) {
        (Frame::Planar, Frame::Planar) => euclidean_distance(a, b),
        (Frame::Spherical, Frame::Spherical) => haversine_distance(a, b, radius),
        _ => Err(Error::FrameMismatch),
    }
}

/// Gaussian kernel `exp(-d²/η²)`, zeroed where it does not exceed the
/// threshold `W*`. A threshold of 0 disables truncation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelSpec {
    pub bandwidth: f64,
    pub threshold: f64,
}

impl KernelSpec {
    pub fn new(bandwidth: f64, threshold: f64) -> Result<Self> {
        let spec = KernelSpec { bandwidth, threshold };
        spec.validate()?;
        Ok(spec)
    }

    pub fn untruncated(bandwidth: f64) -> Result<Self> {
        Self::new(bandwidth, 0.0)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.bandwidth > 0.0 && self.bandwidth.is_finite()) {
            return Err(Error::InvalidKernel(format!(
                "bandwidth {} must be finite and > 0",
                self.bandwidth
            )));
        }
        if !(0.0..1.0).contains(&self.threshold) {
            return Err(Error::InvalidKernel(format!(
                "threshold {} must lie in [0, 1)",
                self.threshold
            )));
        }
        Ok(())
    }

    pub fn with_threshold(self, threshold: f64) -> Self {
        KernelSpec { threshold, ..self }
    }
}

pub fn kernel_weight(d: f64, spec: &KernelSpec) -> f64 {
    debug_assert!(d >= 0.0);
    let r = d / spec.bandwidth;
    let w = (-(r * r)).exp();
    if w > spec.threshold {
        w
    } else {
        0.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActiveSite {
    pub index: usize,
    pub weight: f64,
}

/// Sites that keep a nonzero kernel weight relative to `centre`, in input order.
pub fn active_locations(
    centre: &Coordinate,
    sites: &[Coordinate],
    spec: &KernelSpec,
    radius: f64,
) -> Result<Vec<ActiveSite>> {
    if sites.is_empty() {
        return Err(Error::Empty("site list"));
    }
    let mut active = Vec::new();
    for (index, site) in sites.iter().enumerate() {
        let weight = kernel_weight(distance(centre, site, radius)?, spec);
        if weight > 0.0 {
            active.push(ActiveSite { index, weight });
        }
    }
    Ok(active)
}
