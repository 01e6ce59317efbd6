use serde::{Deserialize, Serialize};

use super::TreeError;

/// Sample times of a signal, in integer microseconds.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Timebase {
    Uniform { t0_us: i64, dt_us: u64, n: u64 },
    Explicit { times_us: Vec<i64> },
}

impl Timebase {
    pub fn uniform(t0_us: i64, dt_us: u64, n: u64) -> Self {
        Timebase::Uniform { t0_us, dt_us, n }
    }

    pub fn len(&self) -> usize {
        match self {
            Timebase::Uniform { n, .. } => *n as usize,
            Timebase::Explicit { times_us } => times_us.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn validate(&self) -> Result<(), String> {
        match self {
            Timebase::Uniform { t0_us, dt_us, n } => {
                if *dt_us == 0 {
                    return Err("uniform dt_us must be >= 1".into());
                }
                if *n == 0 {
                    return Err("uniform n must be >= 1".into());
                }
                let span = (*dt_us as i128) * (*n as i128 - 1);
                if i64::try_from(*t0_us as i128 + span).is_err() {
                    return Err("uniform timebase overflows i64 microseconds".into());
                }
                Ok(())
            }
            Timebase::Explicit { times_us } => {
                if times_us.is_empty() {
                    return Err("explicit timebase is empty".into());
                }
                if times_us.windows(2).any(|w| w[0] >= w[1]) {
                    return Err("explicit times must be strictly ascending".into());
                }
                Ok(())
            }
        }
    }

    pub fn time_at(&self, i: usize) -> i64 {
        match self {
            Timebase::Uniform { t0_us, dt_us, .. } => t0_us + (i as i64) * (*dt_us as i64),
            Timebase::Explicit { times_us } => times_us[i],
        }
    }

    /// Every sample time, expanded.
    pub fn times(&self) -> Vec<i64> {
        (0..self.len()).map(|i| self.time_at(i)).collect()
    }
}

/// A waveform: samples on a timebase.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Signal {
    pub timebase: Timebase,
    pub samples: Vec<f64>,
    pub units: String,
}

impl Signal {
    pub fn new(timebase: Timebase, samples: Vec<f64>, units: &str) -> Result<Self, TreeError> {
        let s = Signal {
            timebase,
            samples,
            units: units.to_string(),
        };
        s.validate()?;
        Ok(s)
    }

    pub fn uniform(t0_us: i64, dt_us: u64, samples: Vec<f64>, units: &str) -> Result<Self, TreeError> {
        let n = samples.len() as u64;
        Self::new(Timebase::uniform(t0_us, dt_us, n), samples, units)
    }

    pub fn validate(&self) -> Result<(), TreeError> {
        self.timebase.validate().map_err(TreeError::BadSignal)?;
        if self.samples.len() != self.timebase.len() {
            return Err(TreeError::BadSignal(format!(
                "{} samples for a timebase of {}",
                self.samples.len(),
                self.timebase.len()
            )));
        }
        if let Some(i) = self.samples.iter().position(|v| !v.is_finite()) {
            return Err(TreeError::BadSignal(format!("sample {i} is not finite")));
        }
        Ok(())
    }

    /// Bitwise equality of timebase and samples (units included).
    pub fn bit_eq(&self, other: &Signal) -> bool {
        self.timebase == other.timebase
            && self.units == other.units
            && self.samples.len() == other.samples.len()
            && self
                .samples
                .iter()
                .zip(&other.samples)
                .all(|(a, b)| a.to_bits() == b.to_bits())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamValue {
    Int(i64),
    Float(f64),
    Text(String),
    Bool(bool),
}

/// A scalar value with optional units.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Parameter {
    pub value: ParamValue,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub units: Option<String>,
}

impl Parameter {
    pub fn new(value: ParamValue, units: Option<&str>) -> Self {
        Parameter {
            value,
            units: units.map(str::to_string),
        }
    }

    pub fn int(v: i64) -> Self {
        Self::new(ParamValue::Int(v), None)
    }

    pub fn float(v: f64, units: &str) -> Self {
        Self::new(ParamValue::Float(v), Some(units))
    }

    pub fn text(v: &str) -> Self {
        Self::new(ParamValue::Text(v.to_string()), None)
    }

    pub fn validate(&self) -> Result<(), TreeError> {
        match self.value {
            ParamValue::Float(v) if !v.is_finite() => {
                Err(TreeError::BadParameter("float value is not finite".into()))
            }
            _ => Ok(()),
        }
    }
}

pub(crate) mod blob {
    //! `.sig` files: `STSG`, u16 LE version, timebase kind byte, timebase
    //! fields, then samples, all little-endian.

    use super::Timebase;

    pub const MAGIC: &[u8; 4] = b"STSG";
    pub const VERSION: u16 = 1;
    const KIND_UNIFORM: u8 = 0;
    const KIND_EXPLICIT: u8 = 1;

    pub fn encode(timebase: &Timebase, samples: &[f64]) -> Vec<u8> {
        let mut out = Vec::with_capacity(32 + 16 * samples.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        match timebase {
            Timebase::Uniform { t0_us, dt_us, n } => {
                out.push(KIND_UNIFORM);
                out.extend_from_slice(&t0_us.to_le_bytes());
                out.extend_from_slice(&dt_us.to_le_bytes());
                out.extend_from_slice(&n.to_le_bytes());
            }
            Timebase::Explicit { times_us } => {
                out.push(KIND_EXPLICIT);
                out.extend_from_slice(&(times_us.len() as u64).to_le_bytes());
                for t in times_us {
                    out.extend_from_slice(&t.to_le_bytes());
                }
            }
        }
        for v in samples {
            out.extend_from_slice(&v.to_le_bytes());
        }
        out
    }

    struct Cursor<'a> {
        buf: &'a [u8],
        pos: usize,
    }

    impl<'a> Cursor<'a> {
        fn take<const N: usize>(&mut self) -> Result<[u8; N], String> {
            let end = self.pos + N;
            let bytes = self
                .buf
                .get(self.pos..end)
                .ok_or_else(|| format!("truncated at byte {}", self.pos))?;
            self.pos = end;
            Ok(bytes.try_into().unwrap())
        }

        fn u64(&mut self) -> Result<u64, String> {
            self.take::<8>().map(u64::from_le_bytes)
        }

        fn i64(&mut self) -> Result<i64, String> {
            self.take::<8>().map(i64::from_le_bytes)
        }
    }

    pub fn decode(buf: &[u8]) -> Result<(Timebase, Vec<f64>), String> {
        let mut c = Cursor { buf, pos: 0 };
        if &c.take::<4>()? != MAGIC {
            return Err("bad magic".into());
        }
        let version = u16::from_le_bytes(c.take::<2>()?);
        if version != VERSION {
            return Err(format!("unsupported version {version}"));
        }
        let [kind] = c.take::<1>()?;
        let timebase = match kind {
            KIND_UNIFORM => {
                let t0_us = c.i64()?;
                let dt_us = c.u64()?;
                let n = c.u64()?;
                Timebase::Uniform { t0_us, dt_us, n }
            }
            KIND_EXPLICIT => {
                let n = c.u64()? as usize;
                if n > buf.len() / 8 {
                    return Err("explicit length exceeds file size".into());
                }
                let times_us = (0..n).map(|_| c.i64()).collect::<Result<_, _>>()?;
                Timebase::Explicit { times_us }
            }
            k => return Err(format!("unknown timebase kind {k}")),
        };
        let n = timebase.len();
        if buf.len() - c.pos != n * 8 {
            return Err(format!(
                "expected {} sample bytes, found {}",
                n * 8,
                buf.len() - c.pos
            ));
        }
        let samples = (0..n)
            .map(|_| c.take::<8>().map(f64::from_le_bytes))
            .collect::<Result<_, _>>()?;
        Ok((timebase, samples))
    }
}
