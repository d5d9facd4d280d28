//! Spherical distance helpers and a local metric frame for planar geometry.

use serde::{Deserialize, Serialize};

pub const EARTH_RADIUS_M: f64 = 6_371_000.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatLng {
    pub lat: f64,
    pub lng: f64,
}

impl LatLng {
    pub const fn new(lat: f64, lng: f64) -> Self {
        Self { lat, lng }
    }

    pub fn lerp(self, other: LatLng, t: f64) -> LatLng {
        LatLng {
            lat: self.lat + (other.lat - self.lat) * t,
            lng: self.lng + (other.lng - self.lng) * t,
        }
    }
}

/// Great-circle distance in meters.
pub fn haversine(a: LatLng, b: LatLng) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlng = (b.lng - a.lng).to_radians();
    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlng / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_M * h.sqrt().min(1.0).asin()
}

/// Summed haversine length of a polyline.
pub fn polyline_length(points: &[LatLng]) -> f64 {
    points.windows(2).map(|w| haversine(w[0], w[1])).sum()
}

/// Equirectangular frame around an origin, in meters. Accurate to well under
/// a centimeter per hundred meters at city scale.
#[derive(Debug, Clone, Copy)]
pub struct LocalFrame {
    origin: LatLng,
    cos_lat: f64,
}

impl LocalFrame {
    pub fn new(origin: LatLng) -> Self {
        Self { origin, cos_lat: origin.lat.to_radians().cos() }
    }

    pub fn to_xy(&self, p: LatLng) -> (f64, f64) {
        let x = (p.lng - self.origin.lng).to_radians() * EARTH_RADIUS_M * self.cos_lat;
        let y = (p.lat - self.origin.lat).to_radians() * EARTH_RADIUS_M;
        (x, y)
    }

    pub fn from_xy(&self, x: f64, y: f64) -> LatLng {
        LatLng {
            lat: self.origin.lat + (y / EARTH_RADIUS_M).to_degrees(),
            lng: self.origin.lng + (x / (EARTH_RADIUS_M * self.cos_lat)).to_degrees(),
        }
    }
}

/// Distance from `p` to the segment `a`-`b` and the foot parameter in `[0, 1]`,
/// measured in a frame centered on `p`.
pub fn point_segment_distance(p: LatLng, a: LatLng, b: LatLng) -> (f64, f64) {
    let frame = LocalFrame::new(p);
    let (ax, ay) = frame.to_xy(a);
    let (bx, by) = frame.to_xy(b);
    let (dx, dy) = (bx - ax, by - ay);
    let len2 = dx * dx + dy * dy;
    let t = if len2 > 0.0 { ((-ax * dx - ay * dy) / len2).clamp(0.0, 1.0) } else { 0.0 };
    let (fx, fy) = (ax + t * dx, ay + t * dy);
    ((fx * fx + fy * fy).sqrt(), t)
}

/// Axis-aligned lat/lng box.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bounds {
    pub lat_min: f64,
    pub lat_max: f64,
    pub lng_min: f64,
    pub lng_max: f64,
}

impl Bounds {
    pub fn from_points(points: impl IntoIterator<Item = LatLng>) -> Option<Self> {
        let mut it = points.into_iter();
        let first = it.next()?;
        let mut b = Bounds { lat_min: first.lat, lat_max: first.lat, lng_min: first.lng, lng_max: first.lng };
        for p in it {
            b.lat_min = b.lat_min.min(p.lat);
            b.lat_max = b.lat_max.max(p.lat);
            b.lng_min = b.lng_min.min(p.lng);
            b.lng_max = b.lng_max.max(p.lng);
        }
        Some(b)
    }

    pub fn contains(&self, p: LatLng) -> bool {
        (self.lat_min..=self.lat_max).contains(&p.lat) && (self.lng_min..=self.lng_max).contains(&p.lng)
    }

    /// Grows the box by `meters` on every side.
    pub fn expanded(&self, meters: f64) -> Self {
        let dlat = (meters / EARTH_RADIUS_M).to_degrees();
        let mid = ((self.lat_min + self.lat_max) / 2.0).to_radians().cos().max(1e-6);
        let dlng = dlat / mid;
        Bounds {
            lat_min: self.lat_min - dlat,
            lat_max: self.lat_max + dlat,
            lng_min: self.lng_min - dlng,
            lng_max: self.lng_max + dlng,
        }
    }

    pub fn is_degenerate(&self) -> bool {
        !(self.lat_max > self.lat_min && self.lng_max > self.lng_min)
    }

    pub fn south_west(&self) -> LatLng {
        LatLng::new(self.lat_min, self.lng_min)
    }
}
