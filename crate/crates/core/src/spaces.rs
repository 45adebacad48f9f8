//! State/action spaces, points and transitions.

use std::fmt;

use crate::wire::{put_f64, put_u32, put_u64, Reader};
use crate::{Error, Result};

/// A state or action value.
#[derive(Clone, Debug, PartialEq)]
pub enum Point {
    Discrete(usize),
    Continuous(Vec<f64>),
}

impl Point {
    pub fn index(&self) -> Option<usize> {
        match self {
            Point::Discrete(i) => Some(*i),
            Point::Continuous(_) => None,
        }
    }

    pub fn coords(&self) -> Option<&[f64]> {
        match self {
            Point::Discrete(_) => None,
            Point::Continuous(v) => Some(v),
        }
    }

    pub fn is_finite(&self) -> bool {
        match self {
            Point::Discrete(_) => true,
            Point::Continuous(v) => v.iter().all(|x| x.is_finite()),
        }
    }
}

impl fmt::Display for Point {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Point::Discrete(i) => write!(f, "{i}"),
            Point::Continuous(v) => {
                for (k, x) in v.iter().enumerate() {
                    if k > 0 {
                        f.write_str(",")?;
                    }
                    write!(f, "{x}")?;
                }
                Ok(())
            }
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum Space {
    Discrete { cardinality: usize },
    Box { low: Vec<f64>, high: Vec<f64> },
}

pub type StateSpace = Space;
pub type ActionSpace = Space;

impl Space {
    pub fn discrete(cardinality: usize) -> Result<Self> {
        if cardinality == 0 {
            return Err(Error::invalid("discrete space needs cardinality >= 1"));
        }
        Ok(Space::Discrete { cardinality })
    }

    pub fn boxed(low: Vec<f64>, high: Vec<f64>) -> Result<Self> {
        if low.is_empty() || low.len() != high.len() {
            return Err(Error::invalid("box bounds must be non-empty and equal length"));
        }
        if low.iter().chain(&high).any(|v| !v.is_finite()) {
            return Err(Error::NonFinite("box bounds".into()));
        }
        if low.iter().zip(&high).any(|(l, h)| l >= h) {
            return Err(Error::invalid("box requires low < high componentwise"));
        }
        Ok(Space::Box { low, high })
    }

    pub fn cardinality(&self) -> Option<usize> {
        match self {
            Space::Discrete { cardinality } => Some(*cardinality),
            Space::Box { .. } => None,
        }
    }

    pub fn is_discrete(&self) -> bool {
        matches!(self, Space::Discrete { .. })
    }

    /// Lebesgue volume of a box; the cardinality for discrete spaces.
    pub fn volume(&self) -> f64 {
        match self {
            Space::Discrete { cardinality } => *cardinality as f64,
            Space::Box { low, high } => low.iter().zip(high).map(|(l, h)| h - l).product(),
        }
    }

    pub fn contains(&self, p: &Point) -> bool {
        match (self, p) {
            (Space::Discrete { cardinality }, Point::Discrete(i)) => i < cardinality,
            (Space::Box { low, high }, Point::Continuous(v)) => {
                v.len() == low.len()
                    && v
                        .iter()
                        .zip(low.iter().zip(high))
                        .all(|(x, (l, h))| x.is_finite() && *x >= *l && *x <= *h)
            }
            _ => false,
        }
    }

    /// Width of [`Space::encode`]'s output.
    pub fn encoding_dim(&self) -> usize {
        match self {
            Space::Discrete { cardinality } => *cardinality,
            Space::Box { low, .. } => low.len(),
        }
    }

    /// One-hot for discrete points; box coordinates rescaled to [-1, 1].
    pub fn encode(&self, p: &Point, out: &mut Vec<f64>) -> Result<()> {
        match (self, p) {
            (Space::Discrete { cardinality }, Point::Discrete(i)) => {
                if i >= cardinality {
                    return Err(Error::invalid(format!("index {i} outside space of {cardinality}")));
                }
                let start = out.len();
                out.resize(start + cardinality, 0.0);
                out[start + i] = 1.0;
                Ok(())
            }
            (Space::Box { low, high }, Point::Continuous(v)) => {
                if v.len() != low.len() {
                    return Err(Error::DimensionMismatch { expected: low.len(), got: v.len() });
                }
                if !p.is_finite() {
                    return Err(Error::NonFinite("point".into()));
                }
                out.extend(
                    v.iter()
                        .zip(low.iter().zip(high))
                        .map(|(x, (l, h))| 2.0 * (x - l) / (h - l) - 1.0),
                );
                Ok(())
            }
            _ => Err(Error::invalid("point kind does not match space")),
        }
    }

    pub(crate) fn write_wire(&self, out: &mut Vec<u8>) {
        match self {
            Space::Discrete { cardinality } => {
                out.push(0);
                put_u64(out, *cardinality as u64);
            }
            Space::Box { low, high } => {
                out.push(1);
                put_u32(out, low.len() as u32);
                for v in low.iter().chain(high) {
                    put_f64(out, *v);
                }
            }
        }
    }

    pub(crate) fn read_wire(r: &mut Reader<'_>) -> Result<Self> {
        match r.u8()? {
            0 => {
                let n = r.u64()?;
                if n == 0 || n > (1 << 32) {
                    return Err(Error::Format(format!("discrete cardinality {n} out of range")));
                }
                Space::discrete(n as usize).map_err(|e| Error::Format(e.to_string()))
            }
            1 => {
                let dim = r.u32()? as usize;
                if dim == 0 || dim > 1024 {
                    return Err(Error::Format(format!("box dimension {dim} out of range")));
                }
                let low = r.f64s(dim)?;
                let high = r.f64s(dim)?;
                Space::boxed(low, high).map_err(|e| Error::Format(e.to_string()))
            }
            t => Err(Error::Format(format!("unknown space tag {t}"))),
        }
    }

    /// Text descriptor: `discrete N` or `box l1,l2 h1,h2`.
    pub fn descriptor(&self) -> String {
        match self {
            Space::Discrete { cardinality } => format!("discrete {cardinality}"),
            Space::Box { low, high } => format!(
                "box {} {}",
                Point::Continuous(low.clone()),
                Point::Continuous(high.clone())
            ),
        }
    }

    pub fn parse_descriptor(text: &str) -> Result<Self> {
        let parts: Vec<&str> = text.split_whitespace().collect();
        match parts.as_slice() {
            ["discrete", n] => {
                let n: usize = n.parse().map_err(|_| Error::invalid(format!("bad cardinality {n:?}")))?;
                Space::discrete(n)
            }
            ["box", low, high] => Space::boxed(parse_floats(low)?, parse_floats(high)?),
            _ => Err(Error::invalid(format!("bad space descriptor {text:?}"))),
        }
    }

    /// Parses a point written by `Point`'s `Display` impl.
    pub fn parse_point(&self, text: &str) -> Result<Point> {
        let p = match self {
            Space::Discrete { .. } => Point::Discrete(
                text.parse().map_err(|_| Error::invalid(format!("bad discrete point {text:?}")))?,
            ),
            Space::Box { .. } => Point::Continuous(parse_floats(text)?),
        };
        if !self.contains(&p) {
            return Err(Error::invalid(format!("point {text} outside {}", self.descriptor())));
        }
        Ok(p)
    }
}

fn parse_floats(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|t| {
            let v: f64 = t.parse().map_err(|_| Error::invalid(format!("bad number {t:?}")))?;
            if v.is_finite() {
                Ok(v)
            } else {
                Err(Error::NonFinite("number".into()))
            }
        })
        .collect()
}

/// Joint input encoding for the feature map `phi(s, a)`.
///
/// Discrete x discrete pairs get the joint one-hot `e_(s,a)` (index
/// `s * |A| + a`), which makes the tabular factorization an exact special
/// case. Anything else concatenates the per-space encodings.
pub fn encode_pair(states: &Space, actions: &Space, s: &Point, a: &Point, out: &mut Vec<f64>) -> Result<()> {
    match (states, actions, s, a) {
        (
            Space::Discrete { cardinality: ns },
            Space::Discrete { cardinality: na },
            Point::Discrete(si),
            Point::Discrete(ai),
        ) => {
            if si >= ns || ai >= na {
                return Err(Error::invalid(format!("pair ({si},{ai}) outside {ns}x{na}")));
            }
            let start = out.len();
            out.resize(start + ns * na, 0.0);
            out[start + si * na + ai] = 1.0;
            Ok(())
        }
        _ => {
            states.encode(s, out)?;
            actions.encode(a, out)
        }
    }
}

pub fn pair_encoding_dim(states: &Space, actions: &Space) -> usize {
    match (states, actions) {
        (Space::Discrete { cardinality: ns }, Space::Discrete { cardinality: na }) => ns * na,
        _ => states.encoding_dim() + actions.encoding_dim(),
    }
}

/// One `(s, a, r, s')` sample.
#[derive(Clone, Debug, PartialEq)]
pub struct Transition {
    pub state: Point,
    pub action: Point,
    /// In `[0, 1]`.
    pub reward: f64,
    pub next_state: Point,
    /// `next_state` ended the episode.
    pub terminal: bool,
}

impl Transition {
    pub fn new(state: Point, action: Point, reward: f64, next_state: Point, terminal: bool) -> Result<Self> {
        if !(0.0..=1.0).contains(&reward) {
            return Err(Error::invalid(format!("reward {reward} outside [0, 1]")));
        }
        if !state.is_finite() || !action.is_finite() || !next_state.is_finite() {
            return Err(Error::NonFinite("transition".into()));
        }
        Ok(Transition { state, action, reward, next_state, terminal })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_degenerate_spaces() {
        assert!(Space::discrete(0).is_err());
        assert!(Space::boxed(vec![0.0, 1.0], vec![1.0, 1.0]).is_err());
        assert!(Space::boxed(vec![], vec![]).is_err());
    }

    #[test]
    fn box_encoding_maps_bounds_to_unit_interval() {
        let s = Space::boxed(vec![0.0, -2.0], vec![1.0, 2.0]).unwrap();
        let mut out = vec![];
        s.encode(&Point::Continuous(vec![1.0, -2.0]), &mut out).unwrap();
        assert_eq!(out, vec![1.0, -1.0]);
    }

    #[test]
    fn joint_one_hot_for_discrete_pairs() {
        let s = Space::discrete(3).unwrap();
        let a = Space::discrete(2).unwrap();
        let mut out = vec![];
        encode_pair(&s, &a, &Point::Discrete(2), &Point::Discrete(1), &mut out).unwrap();
        assert_eq!(out.len(), 6);
        assert_eq!(out[5], 1.0);
        assert_eq!(out.iter().sum::<f64>(), 1.0);
    }

    #[test]
    fn descriptor_round_trip() {
        for s in [
            Space::discrete(7).unwrap(),
            Space::boxed(vec![0.0, -0.5], vec![1.0, 0.25]).unwrap(),
        ] {
            assert_eq!(Space::parse_descriptor(&s.descriptor()).unwrap(), s);
        }
    }

    #[test]
    fn transition_reward_range() {
        let p = Point::Discrete(0);
        assert!(Transition::new(p.clone(), p.clone(), 1.5, p.clone(), false).is_err());
        assert!(Transition::new(p.clone(), p.clone(), 0.5, p, false).is_ok());
    }
}
