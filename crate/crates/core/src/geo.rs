//! Spherical geometry and the continental region split.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Mean Earth radius (IUGG) in kilometres.
pub const EARTH_RADIUS_KM: f64 = 6371.0088;

/// Nominal pressure level of every graph, in hPa.
pub const DEFAULT_PRESSURE_HPA: f64 = 500.0;

/// A validated location on a single pressure level.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RawPoint", into = "RawPoint")]
pub struct GeoPoint {
    lat: f64,
    lon: f64,
    pressure: f64,
}

#[derive(Serialize, Deserialize)]
struct RawPoint {
    lat: f64,
    lon: f64,
    pressure: f64,
}

impl TryFrom<RawPoint> for GeoPoint {
    type Error = Error;

    fn try_from(raw: RawPoint) -> Result<Self> {
        GeoPoint::with_pressure(raw.lat, raw.lon, raw.pressure)
    }
}

impl From<GeoPoint> for RawPoint {
    fn from(p: GeoPoint) -> Self {
        RawPoint {
            lat: p.lat,
            lon: p.lon,
            pressure: p.pressure,
        }
    }
}

impl GeoPoint {
    /// Point on the default 500 hPa level.
    pub fn new(lat: f64, lon: f64) -> Result<Self> {
        Self::with_pressure(lat, lon, DEFAULT_PRESSURE_HPA)
    }

    pub fn with_pressure(lat: f64, lon: f64, pressure: f64) -> Result<Self> {
        if !(-90.0..=90.0).contains(&lat) {
            return Err(Error::InvalidPoint(format!("latitude {lat} outside [-90, 90]")));
        }
        if !(-180.0..180.0).contains(&lon) {
            return Err(Error::InvalidPoint(format!("longitude {lon} outside [-180, 180)")));
        }
        if !(pressure > 0.0 && pressure.is_finite()) {
            return Err(Error::InvalidPoint(format!("pressure level {pressure} must be positive")));
        }
        Ok(GeoPoint { lat, lon, pressure })
    }

    pub fn lat(&self) -> f64 {
        self.lat
    }

    pub fn lon(&self) -> f64 {
        self.lon
    }

    pub fn pressure(&self) -> f64 {
        self.pressure
    }
}

/// Great-circle distance in kilometres (haversine form). Ignores pressure level.
pub fn haversine_km(a: &GeoPoint, b: &GeoPoint) -> f64 {
    let (lat1, lat2) = (a.lat.to_radians(), b.lat.to_radians());
    let dlat = lat2 - lat1;
    let dlon = (b.lon - a.lon).to_radians();

    let h = (dlat / 2.0).sin().powi(2) + lat1.cos() * lat2.cos() * (dlon / 2.0).sin().powi(2);
    2.0 * EARTH_RADIUS_KM * h.sqrt().min(1.0).asin()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum RegionName {
    Asia,
    Europe,
    NorthAmerica,
    Australia,
}

impl RegionName {
    pub const ALL: [RegionName; 4] = [
        RegionName::Asia,
        RegionName::Europe,
        RegionName::NorthAmerica,
        RegionName::Australia,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            RegionName::Asia => "Asia",
            RegionName::Europe => "Europe",
            RegionName::NorthAmerica => "NorthAmerica",
            RegionName::Australia => "Australia",
        }
    }

    pub fn index(&self) -> usize {
        *self as usize
    }
}

impl fmt::Display for RegionName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for RegionName {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm: String = s
            .chars()
            .filter(|c| c.is_ascii_alphanumeric())
            .collect::<String>()
            .to_ascii_lowercase();
        match norm.as_str() {
            "asia" => Ok(RegionName::Asia),
            "europe" => Ok(RegionName::Europe),
            "northamerica" => Ok(RegionName::NorthAmerica),
            "australia" => Ok(RegionName::Australia),
            _ => Err(Error::InvalidConfig(format!("unknown region `{s}`"))),
        }
    }
}

/// Lat/lon box, bounds inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub name: RegionName,
    pub lat_min: f64,
    pub lat_max: f64,
    pub lon_min: f64,
    pub lon_max: f64,
}

impl Region {
    pub fn contains(&self, p: &GeoPoint) -> bool {
        (self.lat_min..=self.lat_max).contains(&p.lat) && (self.lon_min..=self.lon_max).contains(&p.lon)
    }

    pub fn overlaps(&self, other: &Region) -> bool {
        self.lat_min <= other.lat_max
            && other.lat_min <= self.lat_max
            && self.lon_min <= other.lon_max
            && other.lon_min <= self.lon_max
    }

    /// Default continental box for `name`.
    pub fn default_for(name: RegionName) -> Region {
        let (lat_min, lat_max, lon_min, lon_max) = match name {
            RegionName::Asia => (0.0, 60.0, 60.0, 150.0),
            RegionName::Europe => (35.0, 70.0, -10.0, 40.0),
            RegionName::NorthAmerica => (15.0, 70.0, -170.0, -50.0),
            RegionName::Australia => (-45.0, -10.0, 110.0, 155.0),
        };
        Region {
            name,
            lat_min,
            lat_max,
            lon_min,
            lon_max,
        }
    }
}

pub fn default_regions() -> Vec<Region> {
    RegionName::ALL.iter().map(|&n| Region::default_for(n)).collect()
}

/// The unique region box containing `p`, if any.
pub fn assign_region(p: &GeoPoint, regions: &[Region]) -> Option<Region> {
    regions.iter().find(|r| r.contains(p)).copied()
}
