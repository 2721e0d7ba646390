//! Endpoint annotation data model and the line-delimited JSON manifest format.

use std::collections::BTreeSet;
use std::fmt;
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Sub-pixel image coordinate; pixel centres sit on integers.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(from = "[f64; 2]", into = "[f64; 2]")]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub const fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }

    pub fn dist(self, other: Point) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }
}

impl From<[f64; 2]> for Point {
    fn from([x, y]: [f64; 2]) -> Self {
        Point { x, y }
    }
}

impl From<Point> for [f64; 2] {
    fn from(p: Point) -> Self {
        [p.x, p.y]
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Shot {
    CS,
    MS,
    LS,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Clarity {
    Clear,
    Blur,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Attribute {
    P,
    T,
    A,
    II,
    PI,
    BI,
    TRI,
    TAI,
    SI,
}

impl Attribute {
    pub const ALL: [Attribute; 9] = [
        Attribute::P,
        Attribute::T,
        Attribute::A,
        Attribute::II,
        Attribute::PI,
        Attribute::BI,
        Attribute::TRI,
        Attribute::TAI,
        Attribute::SI,
    ];

    /// Attributes that add a visual artifact on top of the plates.
    pub const INTERFERENCE: [Attribute; 6] = [
        Attribute::II,
        Attribute::PI,
        Attribute::BI,
        Attribute::TRI,
        Attribute::TAI,
        Attribute::SI,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Difficulty {
    Regular,
    Difficult,
    Tough,
}

impl Difficulty {
    pub const ALL: [Difficulty; 3] = [Difficulty::Regular, Difficulty::Difficult, Difficulty::Tough];

    pub fn name(self) -> &'static str {
        match self {
            Difficulty::Regular => "regular",
            Difficulty::Difficult => "difficult",
            Difficulty::Tough => "tough",
        }
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Image axis along which the plates are ordered.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StackAxis {
    #[default]
    X,
    Y,
}

impl StackAxis {
    #[inline]
    pub fn along(self, p: Point) -> f64 {
        match self {
            StackAxis::X => p.x,
            StackAxis::Y => p.y,
        }
    }

    /// Coordinate on the plate-length axis (perpendicular to stacking).
    #[inline]
    pub fn across(self, p: Point) -> f64 {
        match self {
            StackAxis::X => p.y,
            StackAxis::Y => p.x,
        }
    }
}

impl FromStr for StackAxis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "x" | "X" => Ok(StackAxis::X),
            "y" | "Y" => Ok(StackAxis::Y),
            other => Err(Error::Config(format!("unknown stack axis `{other}`"))),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Polarity {
    Anode,
    Cathode,
}

impl Polarity {
    pub const BOTH: [Polarity; 2] = [Polarity::Anode, Polarity::Cathode];

    pub fn name(self) -> &'static str {
        match self {
            Polarity::Anode => "anode",
            Polarity::Cathode => "cathode",
        }
    }

    /// Channel index in two-channel maps.
    pub fn channel(self) -> usize {
        match self {
            Polarity::Anode => 0,
            Polarity::Cathode => 1,
        }
    }
}

/// Sorts by the stack-axis coordinate, ties broken by the other axis.
pub fn sort_points(points: &mut [Point], axis: StackAxis) {
    points.sort_by(|a, b| {
        axis.along(*a)
            .total_cmp(&axis.along(*b))
            .then(axis.across(*a).total_cmp(&axis.across(*b)))
    });
}

pub fn is_sorted(points: &[Point], axis: StackAxis) -> bool {
    points.windows(2).all(|w| {
        let (a, b) = (axis.along(w[0]), axis.along(w[1]));
        a < b || (a == b && axis.across(w[0]) <= axis.across(w[1]))
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EndpointAnnotation {
    pub image_id: String,
    pub width: u32,
    pub height: u32,
    #[serde(rename = "anode")]
    pub anode_points: Vec<Point>,
    #[serde(rename = "cathode")]
    pub cathode_points: Vec<Point>,
    pub shot: Shot,
    pub clarity: Clarity,
    pub attributes: BTreeSet<Attribute>,
    pub difficulty: Difficulty,
    pub stack_axis: StackAxis,
}

impl EndpointAnnotation {
    pub fn points(&self, polarity: Polarity) -> &[Point] {
        match polarity {
            Polarity::Anode => &self.anode_points,
            Polarity::Cathode => &self.cathode_points,
        }
    }

    pub fn points_mut(&mut self, polarity: Polarity) -> &mut Vec<Point> {
        match polarity {
            Polarity::Anode => &mut self.anode_points,
            Polarity::Cathode => &mut self.cathode_points,
        }
    }

    pub fn is_pure(&self) -> bool {
        self.attributes.contains(&Attribute::P)
    }

    fn invalid(&self, reason: impl Into<String>) -> Error {
        Error::InvalidAnnotation {
            image_id: self.image_id.clone(),
            reason: reason.into(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(self.invalid("image size must be positive"));
        }
        let (w, h) = (self.width as f64, self.height as f64);
        for pol in Polarity::BOTH {
            let pts = self.points(pol);
            if pts.is_empty() {
                return Err(self.invalid(format!("no {} points", pol.name())));
            }
            for p in pts {
                if !(p.x >= 0.0 && p.x < w && p.y >= 0.0 && p.y < h) {
                    return Err(self.invalid(format!("{} point ({}, {}) outside {}x{}", pol.name(), p.x, p.y, w, h)));
                }
            }
            let strictly = pts
                .windows(2)
                .all(|s| self.stack_axis.along(s[0]) < self.stack_axis.along(s[1]));
            if !strictly {
                return Err(self.invalid(format!("{} points not strictly sorted along the stack axis", pol.name())));
            }
        }
        if self.attributes.contains(&Attribute::P) && self.attributes.len() != 1 {
            return Err(self.invalid("pure-plate attribute P excludes all others"));
        }
        Ok(())
    }

    /// Maps every point into a `width x height` frame with corner alignment:
    /// pixel 0 maps to 0 and the last pixel maps to the last pixel.
    pub fn rescaled(&self, width: u32, height: u32) -> EndpointAnnotation {
        let sx = corner_scale(self.width, width);
        let sy = corner_scale(self.height, height);
        let map = |p: &Point| Point::new(p.x * sx, p.y * sy);
        EndpointAnnotation {
            width,
            height,
            anode_points: self.anode_points.iter().map(map).collect(),
            cathode_points: self.cathode_points.iter().map(map).collect(),
            ..self.clone()
        }
    }
}

/// Scale factor of the corner-aligned linear map from `from` to `to` pixels.
pub fn corner_scale(from: u32, to: u32) -> f64 {
    if from <= 1 || to <= 1 {
        1.0
    } else {
        (to - 1) as f64 / (from - 1) as f64
    }
}

pub fn read_manifest(path: impl AsRef<Path>) -> Result<Vec<EndpointAnnotation>> {
    let path = path.as_ref();
    let file = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let ann: EndpointAnnotation = serde_json::from_str(&line).map_err(|e| Error::Parse {
            path: format!("{}:{}", path.display(), i + 1),
            reason: e.to_string(),
        })?;
        out.push(ann);
    }
    Ok(out)
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[EndpointAnnotation]) -> Result<()> {
    let path = path.as_ref();
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut w = BufWriter::new(file);
    for r in records {
        let line = serde_json::to_string(r).expect("annotation serializes");
        writeln!(w, "{line}").map_err(|e| Error::io(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
