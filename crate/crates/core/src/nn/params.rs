use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Anything holding named trainable tensors.
///
/// Gradients are represented by a value of the same type, so both visitors
/// must enumerate tensors in the same order.
pub trait Parameters {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor));
    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor));
}

pub fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else {
        format!("{prefix}.{name}")
    }
}

pub fn num_params<P: Parameters + ?Sized>(p: &P) -> usize {
    let mut n = 0;
    p.visit("", &mut |_, t| n += t.len());
    n
}

pub fn flatten<P: Parameters + ?Sized>(p: &P) -> Vec<f64> {
    let mut out = Vec::new();
    p.visit("", &mut |_, t| out.extend_from_slice(t.data()));
    out
}

pub fn load_flat<P: Parameters + ?Sized>(p: &mut P, flat: &[f64]) -> Result<()> {
    let want = num_params(p);
    if want != flat.len() {
        return Err(Error::shape("load_flat", want, flat.len()));
    }
    let mut off = 0;
    p.visit_mut("", &mut |_, t| {
        let n = t.len();
        t.data_mut().copy_from_slice(&flat[off..off + n]);
        off += n;
    });
    Ok(())
}

pub fn zeros_like<P: Parameters + Clone>(p: &P) -> P {
    let mut z = p.clone();
    z.visit_mut("", &mut |_, t| t.fill(0.0));
    z
}

/// `acc += scale * other`, tensor by tensor.
pub fn accumulate<P: Parameters + ?Sized>(acc: &mut P, other: &P, scale: f64) {
    let flat = flatten(other);
    let mut off = 0;
    acc.visit_mut("", &mut |_, t| {
        for v in t.data_mut() {
            *v += scale * flat[off];
            off += 1;
        }
    });
}

pub fn names<P: Parameters + ?Sized>(p: &P) -> Vec<String> {
    let mut out = Vec::new();
    p.visit("", &mut |n, _| out.push(n.to_string()));
    out
}

pub fn all_finite<P: Parameters + ?Sized>(p: &P) -> std::result::Result<(), String> {
    let mut bad = None;
    p.visit("", &mut |n, t| {
        if bad.is_none() && !t.is_finite() {
            bad = Some(n.to_string());
        }
    });
    match bad {
        Some(n) => Err(n),
        None => Ok(()),
    }
}

impl<P: Parameters> Parameters for Vec<P> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(&str, &Tensor)) {
        for (i, p) in self.iter().enumerate() {
            p.visit(&join(prefix, &i.to_string()), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Tensor)) {
        for (i, p) in self.iter_mut().enumerate() {
            p.visit_mut(&join(prefix, &i.to_string()), f);
        }
    }
}
