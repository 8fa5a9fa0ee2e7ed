//! Central finite differences on block-structured arguments.

/// Step used for first derivatives: `1e-5 · (1 + |x|)`.
pub fn first_step(x: f64) -> f64 {
    1e-5 * (1.0 + x.abs())
}

/// Step used for second differences of function values: `1e-4 · (1 + |x|)`.
///
/// Second differences of values lose `eps / h²`, so the fourth root of machine
/// epsilon is used instead of the square root.
pub fn second_step(x: f64) -> f64 {
    1e-4 * (1.0 + x.abs())
}

/// Owned copy of a tuple of points, with helpers to perturb one coordinate.
#[derive(Debug, Clone)]
pub struct Tuple {
    blocks: Vec<Vec<f64>>,
}

impl Tuple {
    pub fn from_refs(x: &[&[f64]]) -> Self {
        Self { blocks: x.iter().map(|b| b.to_vec()).collect() }
    }

    pub fn refs(&self) -> Vec<&[f64]> {
        self.blocks.iter().map(Vec::as_slice).collect()
    }

    pub fn get(&self, block: usize, coord: usize) -> f64 {
        self.blocks[block][coord]
    }

    pub fn set(&mut self, block: usize, coord: usize, value: f64) {
        self.blocks[block][coord] = value;
    }
}

/// Central-difference gradient of `f` with respect to block `i`.
pub fn gradient<E>(
    x: &[&[f64]],
    i: usize,
    mut f: impl FnMut(&[&[f64]]) -> Result<f64, E>,
) -> Result<Vec<f64>, E> {
    let mut t = Tuple::from_refs(x);
    let mut out = Vec::with_capacity(x[i].len());
    for k in 0..x[i].len() {
        let x0 = t.get(i, k);
        let h = first_step(x0);
        t.set(i, k, x0 + h);
        let fp = f(&t.refs())?;
        t.set(i, k, x0 - h);
        let fm = f(&t.refs())?;
        t.set(i, k, x0);
        out.push((fp - fm) / (2.0 * h));
    }
    Ok(out)
}

/// Central second differences of values: entry `(a, b)` approximates
/// `∂² f / ∂x_i^a ∂x_j^b`. Returned row-major with `x[i].len()` rows.
pub fn second_derivatives<E>(
    x: &[&[f64]],
    i: usize,
    j: usize,
    mut f: impl FnMut(&[&[f64]]) -> Result<f64, E>,
) -> Result<Vec<Vec<f64>>, E> {
    let mut t = Tuple::from_refs(x);
    let (di, dj) = (x[i].len(), x[j].len());
    let mut out = vec![vec![0.0; dj]; di];
    for a in 0..di {
        for b in 0..dj {
            if i == j && a == b {
                let x0 = t.get(i, a);
                let h = second_step(x0);
                let f0 = f(&t.refs())?;
                t.set(i, a, x0 + h);
                let fp = f(&t.refs())?;
                t.set(i, a, x0 - h);
                let fm = f(&t.refs())?;
                t.set(i, a, x0);
                out[a][b] = (fp - 2.0 * f0 + fm) / (h * h);
                continue;
            }
            let (xa, xb) = (t.get(i, a), t.get(j, b));
            let (ha, hb) = (second_step(xa), second_step(xb));
            let mut eval = |sa: f64, sb: f64, t: &mut Tuple| -> Result<f64, E> {
                t.set(i, a, xa + sa * ha);
                t.set(j, b, xb + sb * hb);
                let v = f(&t.refs());
                t.set(i, a, xa);
                t.set(j, b, xb);
                v
            };
            let pp = eval(1.0, 1.0, &mut t)?;
            let pm = eval(1.0, -1.0, &mut t)?;
            let mp = eval(-1.0, 1.0, &mut t)?;
            let mm = eval(-1.0, -1.0, &mut t)?;
            out[a][b] = (pp - pm - mp + mm) / (4.0 * ha * hb);
        }
    }
    Ok(out)
}

/// Jacobian of a block gradient: entry `(a, b)` approximates
/// `∂ g_a / ∂x_j^b` where `g` is the gradient with respect to block `i`.
pub fn gradient_jacobian<E>(
    x: &[&[f64]],
    j: usize,
    rows: usize,
    mut grad: impl FnMut(&[&[f64]]) -> Result<Vec<f64>, E>,
) -> Result<Vec<Vec<f64>>, E> {
    let mut t = Tuple::from_refs(x);
    let dj = x[j].len();
    let mut out = vec![vec![0.0; dj]; rows];
    for b in 0..dj {
        let x0 = t.get(j, b);
        let h = first_step(x0);
        t.set(j, b, x0 + h);
        let gp = grad(&t.refs())?;
        t.set(j, b, x0 - h);
        let gm = grad(&t.refs())?;
        t.set(j, b, x0);
        for a in 0..rows {
            out[a][b] = (gp[a] - gm[a]) / (2.0 * h);
        }
    }
    Ok(out)
}
