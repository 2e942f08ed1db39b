//! Named parameter storage and the `RNVW` weight container.
//!
//! Layout (little-endian): magic `RNVW`, version `u8`, count `u32`, then per
//! parameter: name length `u16`, UTF-8 name, rank `u8`, one `u32` per
//! extent, and the values as `f32`.

use std::io::{Read, Write};

use rand::Rng;

use super::{Real, Tape, Tensor, Var};
use crate::error::{Error, Result};

const MAGIC: &[u8; 4] = b"RNVW";
const VERSION: u8 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

/// Feasible-set projection applied after each optimizer step.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Constraint {
    None,
    /// Elementwise lower bound.
    Min(f64),
}

#[derive(Clone, Debug)]
struct Param<T> {
    name: String,
    value: Tensor<T>,
    constraint: Constraint,
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
}

impl<T: Real> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, constraint: Constraint) -> ParamId {
        let name = name.into();
        debug_assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.params.push(Param {
            name,
            value,
            constraint,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn constraint(&self, id: ParamId) -> Constraint {
        self.params[id.0].constraint
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Clamp every constrained parameter into its feasible set. Idempotent.
    pub fn project(&mut self) {
        for p in &mut self.params {
            if let Constraint::Min(lo) = p.constraint {
                let lo = T::of(lo);
                for v in p.value.data_mut() {
                    if *v < lo {
                        *v = lo;
                    }
                }
            }
        }
    }

    pub fn cast<U: Real>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    value: p.value.cast(),
                    constraint: p.constraint,
                })
                .collect(),
        }
    }

    /// Put every parameter on `tape` as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_where(tape, |_| true)
    }

    /// Put every parameter on `tape` as a constant.
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        self.bind_where(tape, |_| false)
    }

    /// Bind parameters whose name satisfies `trainable` as leaves and the
    /// rest as constants.
    pub fn bind_where(&self, tape: &mut Tape<T>, trainable: impl Fn(&str) -> bool) -> Bound {
        let vars = self
            .params
            .iter()
            .map(|p| {
                if trainable(&p.name) {
                    tape.leaf(p.value.clone())
                } else {
                    tape.constant(p.value.clone())
                }
            })
            .collect();
        Bound { vars }
    }

    /// Copy values by name from `other`; every parameter must be present
    /// with a matching shape.
    pub fn load_from(&mut self, named: &[(String, Tensor<f32>)]) -> Result<()> {
        for p in &mut self.params {
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == p.name)
                .ok_or_else(|| Error::MissingParam(p.name.clone()))?;
            if t.shape() != p.value.shape() {
                return Err(Error::Format {
                    what: "weights",
                    detail: format!("{}: shape {:?} vs expected {:?}", p.name, t.shape(), p.value.shape()),
                });
            }
            p.value = t.cast();
        }
        Ok(())
    }

    pub fn named_f32(&self) -> Vec<(String, Tensor<f32>)> {
        self.params.iter().map(|p| (p.name.clone(), p.value.cast())).collect()
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut buf = Vec::new();
        write_weights(&mut buf, &self.named_f32()).expect("write to Vec");
        buf
    }
}

/// Parameters placed on a tape, indexed by [`ParamId`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    #[inline]
    pub fn get(&self, id: ParamId) -> Var {
        self.vars[id.0]
    }

    pub fn vars(&self) -> impl Iterator<Item = (ParamId, Var)> + '_ {
        self.vars.iter().enumerate().map(|(i, &v)| (ParamId(i), v))
    }
}

/// Registers parameters with their initial values while a network is built.
pub struct ParamBuilder<'a, T, R> {
    store: &'a mut ParamStore<T>,
    rng: &'a mut R,
}

impl<'a, T: Real, R: Rng> ParamBuilder<'a, T, R> {
    pub fn new(store: &'a mut ParamStore<T>, rng: &'a mut R) -> Self {
        Self { store, rng }
    }

    /// Zero-mean uniform initialization in `[-1/sqrt(fan_in), 1/sqrt(fan_in)]`.
    pub fn uniform(&mut self, name: &str, shape: &[usize], fan_in: usize) -> ParamId {
        let a = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data = (0..n).map(|_| T::of(self.rng.gen_range(-a..a))).collect();
        let t = Tensor::new(shape.to_vec(), data).expect("init shape");
        self.store.add(name, t, Constraint::None)
    }

    pub fn constant(&mut self, name: &str, value: Tensor<T>, constraint: Constraint) -> ParamId {
        self.store.add(name, value, constraint)
    }
}

pub fn write_weights<W: Write>(mut w: W, params: &[(String, Tensor<f32>)]) -> Result<()> {
    w.write_all(MAGIC)?;
    w.write_all(&[VERSION])?;
    w.write_all(&(params.len() as u32).to_le_bytes())?;
    for (name, t) in params {
        let nb = name.as_bytes();
        if nb.len() > u16::MAX as usize || t.shape().len() > u8::MAX as usize {
            return Err(Error::Format {
                what: "weights",
                detail: format!("parameter {name} cannot be encoded"),
            });
        }
        w.write_all(&(nb.len() as u16).to_le_bytes())?;
        w.write_all(nb)?;
        w.write_all(&[t.shape().len() as u8])?;
        for &e in t.shape() {
            w.write_all(&(e as u32).to_le_bytes())?;
        }
        for &v in t.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    Ok(())
}

fn read_exact<R: Read, const N: usize>(r: &mut R) -> Result<[u8; N]> {
    let mut b = [0u8; N];
    r.read_exact(&mut b).map_err(|e| Error::Format {
        what: "weights",
        detail: format!("truncated: {e}"),
    })?;
    Ok(b)
}

pub fn read_weights<R: Read>(mut r: R) -> Result<Vec<(String, Tensor<f32>)>> {
    let magic: [u8; 4] = read_exact(&mut r)?;
    if &magic != MAGIC {
        return Err(Error::Format {
            what: "weights",
            detail: "bad magic".into(),
        });
    }
    let [version] = read_exact::<_, 1>(&mut r)?;
    if version != VERSION {
        return Err(Error::Format {
            what: "weights",
            detail: format!("unsupported version {version}"),
        });
    }
    let count = u32::from_le_bytes(read_exact(&mut r)?);
    let mut out = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let len = u16::from_le_bytes(read_exact(&mut r)?) as usize;
        let mut nb = vec![0u8; len];
        r.read_exact(&mut nb)?;
        let name = String::from_utf8(nb).map_err(|_| Error::Format {
            what: "weights",
            detail: "name is not UTF-8".into(),
        })?;
        let [rank] = read_exact::<_, 1>(&mut r)?;
        let mut shape = Vec::with_capacity(rank as usize);
        for _ in 0..rank {
            shape.push(u32::from_le_bytes(read_exact(&mut r)?) as usize);
        }
        let n: usize = shape.iter().product();
        let mut data = Vec::with_capacity(n);
        for _ in 0..n {
            data.push(f32::from_le_bytes(read_exact(&mut r)?));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    Ok(out)
}
