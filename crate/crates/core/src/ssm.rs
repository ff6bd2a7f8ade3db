//! Selective state-space scan, the Mamba block built around it, and the
//! shared-weight bidirectional wrapper.
//!
//! Recurrence per batch element, channel `i` and state `s`:
//!
//! ```text
//! h_t[i,s] = exp(delta_t[i] * A[i,s]) * h_{t-1}[i,s] + delta_t[i] * B_t[s] * u_t[i]
//! y_t[i]   = sum_s C_t[s] * h_t[i,s] + D[i] * u_t[i]          (h_0 = 0)
//! ```
//!
//! Everything here is generic over [`Real`] so the same code runs in single
//! precision (equivalence checks) and double precision (gradient checks,
//! training).

use ndarray::{concatenate, s, Array1, Array2, Array3, Array4, ArrayD, ArrayView2, Axis, IxDyn};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::param::{join, Module, Param, Real};

/// Gradients of [`selective_scan`] with respect to every input.
#[derive(Clone, Debug)]
pub struct ScanGrads<T> {
    pub du: Array3<T>,
    pub ddelta: Array3<T>,
    pub da: Array2<T>,
    pub db: Array3<T>,
    pub dc: Array3<T>,
    pub dd: Array1<T>,
}

fn check_finite<T: Real>(name: &str, it: impl IntoIterator<Item = T>) -> Result<()> {
    if it.into_iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("{name} contains non-finite values")));
    }
    Ok(())
}

fn validate_scan<T: Real>(
    u: &Array3<T>,
    delta: &Array3<T>,
    a: &Array2<T>,
    b: &Array3<T>,
    c: &Array3<T>,
    d: &Array1<T>,
) -> Result<()> {
    let (bsz, n, di) = u.dim();
    let ds = a.dim().1;
    let mismatch = |what: &str, got: &[usize], want: &[usize]| {
        Error::Contract(format!("selective_scan {what}: expected {want:?}, got {got:?}"))
    };
    if delta.dim() != (bsz, n, di) {
        return Err(mismatch("delta", delta.shape(), &[bsz, n, di]));
    }
    if a.dim().0 != di {
        return Err(mismatch("A", a.shape(), &[di, ds]));
    }
    if b.dim() != (bsz, n, ds) {
        return Err(mismatch("B", b.shape(), &[bsz, n, ds]));
    }
    if c.dim() != (bsz, n, ds) {
        return Err(mismatch("C", c.shape(), &[bsz, n, ds]));
    }
    if d.len() != di {
        return Err(mismatch("D", d.shape(), &[di]));
    }
    check_finite("u", u.iter().copied())?;
    check_finite("delta", delta.iter().copied())?;
    check_finite("A", a.iter().copied())?;
    check_finite("B", b.iter().copied())?;
    check_finite("C", c.iter().copied())?;
    check_finite("D", d.iter().copied())?;
    if delta.iter().any(|&v| v <= T::zero()) {
        return Err(Error::Contract("selective_scan requires delta > 0".into()));
    }
    Ok(())
}

/// Sequential reference scan.
pub fn selective_scan<T: Real>(
    u: &Array3<T>,
    delta: &Array3<T>,
    a: &Array2<T>,
    b: &Array3<T>,
    c: &Array3<T>,
    d: &Array1<T>,
) -> Result<Array3<T>> {
    validate_scan(u, delta, a, b, c, d)?;
    Ok(scan_forward(u, delta, a, b, c, d, false).0)
}

/// Runs the recurrence; optionally records every hidden state as (B, N, D, S).
pub(crate) fn scan_forward<T: Real>(
    u: &Array3<T>,
    delta: &Array3<T>,
    a: &Array2<T>,
    b: &Array3<T>,
    c: &Array3<T>,
    d: &Array1<T>,
    keep_states: bool,
) -> (Array3<T>, Option<Array4<T>>) {
    let (bsz, n, di) = u.dim();
    let ds = a.dim().1;
    let mut y = Array3::<T>::zeros((bsz, n, di));
    let mut states = keep_states.then(|| Array4::<T>::zeros((bsz, n, di, ds)));
    let mut h = Array2::<T>::zeros((di, ds));
    for bi in 0..bsz {
        h.fill(T::zero());
        for t in 0..n {
            for i in 0..di {
                let dt = delta[[bi, t, i]];
                let ut = u[[bi, t, i]];
                let mut acc = d[i] * ut;
                for st in 0..ds {
                    let hv = (dt * a[[i, st]]).exp() * h[[i, st]] + dt * b[[bi, t, st]] * ut;
                    h[[i, st]] = hv;
                    acc += c[[bi, t, st]] * hv;
                }
                y[[bi, t, i]] = acc;
            }
            if let Some(st) = states.as_mut() {
                st.slice_mut(s![bi, t, .., ..]).assign(&h);
            }
        }
    }
    (y, states)
}

/// Blocked two-pass scan.
///
/// Each chunk of `chunk_len` steps is scanned from a zero state while the
/// cumulative decay `exp(A * cumsum(delta))` is tracked; a second pass folds
/// the carried state of preceding chunks back in. The chunk pass has no
/// cross-chunk dependency.
pub fn selective_scan_chunked<T: Real>(
    u: &Array3<T>,
    delta: &Array3<T>,
    a: &Array2<T>,
    b: &Array3<T>,
    c: &Array3<T>,
    d: &Array1<T>,
    chunk_len: usize,
) -> Result<Array3<T>> {
    validate_scan(u, delta, a, b, c, d)?;
    if chunk_len == 0 {
        return Err(Error::Contract("chunk_len must be positive".into()));
    }
    let (bsz, n, di) = u.dim();
    let ds = a.dim().1;
    let mut y = Array3::<T>::zeros((bsz, n, di));
    for bi in 0..bsz {
        // Pass 1: independent per chunk.
        let chunks: Vec<(usize, usize)> = (0..n)
            .step_by(chunk_len)
            .map(|s0| (s0, (s0 + chunk_len).min(n)))
            .collect();
        let mut local = Array3::<T>::zeros((n, di, ds));
        let mut decay = Array3::<T>::zeros((n, di, ds));
        for &(s0, s1) in &chunks {
            let mut h = Array2::<T>::zeros((di, ds));
            let mut cum = Array1::<T>::zeros(di);
            for t in s0..s1 {
                for i in 0..di {
                    let dt = delta[[bi, t, i]];
                    cum[i] += dt;
                    let ut = u[[bi, t, i]];
                    for st in 0..ds {
                        let av = a[[i, st]];
                        h[[i, st]] = (dt * av).exp() * h[[i, st]] + dt * b[[bi, t, st]] * ut;
                        local[[t, i, st]] = h[[i, st]];
                        decay[[t, i, st]] = (cum[i] * av).exp();
                    }
                }
            }
        }
        // Pass 2: carry chunk-boundary states forward.
        let mut carry = Array2::<T>::zeros((di, ds));
        for &(s0, s1) in &chunks {
            for t in s0..s1 {
                for i in 0..di {
                    let mut acc = d[i] * u[[bi, t, i]];
                    for st in 0..ds {
                        let hv = local[[t, i, st]] + decay[[t, i, st]] * carry[[i, st]];
                        acc += c[[bi, t, st]] * hv;
                    }
                    y[[bi, t, i]] = acc;
                }
            }
            let last = s1 - 1;
            for i in 0..di {
                for st in 0..ds {
                    carry[[i, st]] = local[[last, i, st]] + decay[[last, i, st]] * carry[[i, st]];
                }
            }
        }
    }
    Ok(y)
}

/// Reverse-mode pass of the scan given recorded hidden states.
pub(crate) fn scan_backward<T: Real>(
    u: &Array3<T>,
    delta: &Array3<T>,
    a: &Array2<T>,
    b: &Array3<T>,
    c: &Array3<T>,
    d: &Array1<T>,
    states: &Array4<T>,
    dy: &Array3<T>,
) -> ScanGrads<T> {
    let (bsz, n, di) = u.dim();
    let ds = a.dim().1;
    let mut g = ScanGrads {
        du: Array3::zeros((bsz, n, di)),
        ddelta: Array3::zeros((bsz, n, di)),
        da: Array2::zeros((di, ds)),
        db: Array3::zeros((bsz, n, ds)),
        dc: Array3::zeros((bsz, n, ds)),
        dd: Array1::zeros(di),
    };
    // gh carries dL/dh_t including the contribution flowing back from h_{t+1}.
    let mut gh = Array2::<T>::zeros((di, ds));
    for bi in 0..bsz {
        gh.fill(T::zero());
        for t in (0..n).rev() {
            for i in 0..di {
                let dyt = dy[[bi, t, i]];
                let dt = delta[[bi, t, i]];
                let ut = u[[bi, t, i]];
                g.dd[i] += dyt * ut;
                let mut du = dyt * d[i];
                let mut ddt = T::zero();
                for st in 0..ds {
                    let av = a[[i, st]];
                    let h_t = states[[bi, t, i, st]];
                    let h_prev = if t > 0 { states[[bi, t - 1, i, st]] } else { T::zero() };
                    g.dc[[bi, t, st]] += dyt * h_t;
                    let ght = gh[[i, st]] + dyt * c[[bi, t, st]];
                    let bt = b[[bi, t, st]];
                    du += ght * dt * bt;
                    g.db[[bi, t, st]] += ght * dt * ut;
                    let decay = (dt * av).exp();
                    let d_decay = ght * h_prev * decay;
                    ddt += ght * bt * ut + d_decay * av;
                    g.da[[i, st]] += d_decay * dt;
                    gh[[i, st]] = ght * decay;
                }
                g.du[[bi, t, i]] = du;
                g.ddelta[[bi, t, i]] = ddt;
            }
        }
    }
    g
}

/// Vector-Jacobian product of [`selective_scan`]: gradients of `sum(dy * y)`.
pub fn selective_scan_vjp<T: Real>(
    u: &Array3<T>,
    delta: &Array3<T>,
    a: &Array2<T>,
    b: &Array3<T>,
    c: &Array3<T>,
    d: &Array1<T>,
    dy: &Array3<T>,
) -> Result<ScanGrads<T>> {
    validate_scan(u, delta, a, b, c, d)?;
    if dy.dim() != u.dim() {
        return Err(Error::Contract(format!(
            "selective_scan_vjp dy: expected {:?}, got {:?}",
            u.shape(),
            dy.shape()
        )));
    }
    let (_, states) = scan_forward(u, delta, a, b, c, d, true);
    Ok(scan_backward(u, delta, a, b, c, d, &states.expect("requested"), dy))
}

/// Reverses the sequence axis of a (B, N, C) batch.
pub fn flip_sequence<T: Real>(x: &Array3<T>) -> Array3<T> {
    x.slice(s![.., ..;-1, ..]).as_standard_layout().into_owned()
}

/// Mamba hyperparameters; `dt_rank = None` means `ceil(channels / 4)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MambaConfig {
    pub d_state: usize,
    pub d_conv: usize,
    pub expand: usize,
    pub dt_rank: Option<usize>,
}

impl Default for MambaConfig {
    fn default() -> Self {
        Self {
            d_state: 16,
            d_conv: 4,
            expand: 1,
            dt_rank: None,
        }
    }
}

impl MambaConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d_state == 0 || self.d_conv == 0 || self.expand == 0 || self.dt_rank == Some(0) {
            return Err(Error::Config(format!(
                "mamba hyperparameters must be positive: {self:?}"
            )));
        }
        Ok(())
    }

    pub fn dt_rank_for(&self, channels: usize) -> usize {
        self.dt_rank.unwrap_or(channels.div_ceil(4))
    }
}

/// Learnable arrays of one Mamba block. Linear maps are stored as
/// (out, in) matrices.
#[derive(Clone, Debug)]
pub struct MambaParams<T: Real = f64> {
    pub in_proj: Param<T>,
    pub conv_weight: Param<T>,
    pub conv_bias: Param<T>,
    pub x_proj: Param<T>,
    pub dt_proj_weight: Param<T>,
    pub dt_proj_bias: Param<T>,
    pub a_log: Param<T>,
    pub d: Param<T>,
    pub out_proj: Param<T>,
    pub channels: usize,
    pub d_inner: usize,
    pub d_state: usize,
    pub d_conv: usize,
    pub dt_rank: usize,
}

fn uniform<T: Real, R: Rng + ?Sized>(shape: &[usize], bound: f64, rng: &mut R) -> Param<T> {
    let n: usize = shape.iter().product();
    let v: Vec<T> = (0..n).map(|_| T::lit(rng.random_range(-bound..=bound))).collect();
    Param::new(ArrayD::from_shape_vec(IxDyn(shape), v).expect("shape"))
}

fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn silu<T: Real>(x: T) -> T {
    x * sigmoid(x)
}

fn silu_grad<T: Real>(x: T) -> T {
    let s = sigmoid(x);
    s * (T::one() + x * (T::one() - s))
}

fn view2<T: Real>(p: &Param<T>) -> ArrayView2<'_, T> {
    let sh = p.shape();
    ArrayView2::from_shape((sh[0], sh[1]), p.data()).expect("2-d param")
}

fn add_into<T: Real>(p: &mut Param<T>, g: &Array2<T>) {
    for (a, v) in p.grad_mut().iter_mut().zip(g.iter()) {
        *a += *v;
    }
}

/// Intermediates of one Mamba forward pass.
#[derive(Clone, Debug)]
pub struct MambaCache<T> {
    x2: Array2<T>,
    xs: Array3<T>,
    z: Array2<T>,
    xc: Array3<T>,
    xa: Array3<T>,
    dt_in: Array2<T>,
    dt_pre: Array2<T>,
    delta: Array3<T>,
    bm: Array3<T>,
    cm: Array3<T>,
    a: Array2<T>,
    y: Array2<T>,
    yg: Array2<T>,
    states: Array4<T>,
}

impl<T: Real> MambaParams<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, cfg: &MambaConfig, rng: &mut R) -> Result<Self> {
        cfg.validate()?;
        if channels == 0 {
            return Err(Error::Config("mamba channels must be positive".into()));
        }
        let di = cfg.expand * channels;
        let ds = cfg.d_state;
        let r = cfg.dt_rank_for(channels);
        let k = cfg.d_conv;
        let lin = |fan_in: usize| 1.0 / (fan_in as f64).sqrt();
        let in_proj = uniform(&[2 * di, channels], lin(channels), rng);
        let conv_weight = uniform(&[di, k], lin(k), rng);
        let conv_bias = uniform(&[di], lin(k), rng);
        let x_proj = uniform(&[r + 2 * ds, di], lin(di), rng);
        let dt_proj_weight = uniform(&[di, r], (r as f64).powf(-0.5), rng);
        let (dt_min, dt_max) = (1e-3f64, 1e-1f64);
        let bias: Vec<T> = (0..di)
            .map(|_| {
                let u: f64 = rng.random();
                let dt = (u * (dt_max.ln() - dt_min.ln()) + dt_min.ln()).exp().max(1e-4);
                // inverse softplus
                T::lit(dt + (-(-dt).exp_m1()).ln())
            })
            .collect();
        let dt_proj_bias = Param::new(ArrayD::from_shape_vec(IxDyn(&[di]), bias).expect("shape"));
        let a_log = Param::new(ArrayD::from_shape_fn(IxDyn(&[di, ds]), |ix| {
            T::lit(((ix[1] + 1) as f64).ln())
        }));
        let d = Param::filled(&[di], T::one());
        let out_proj = uniform(&[channels, di], lin(di), rng);
        Ok(Self {
            in_proj,
            conv_weight,
            conv_bias,
            x_proj,
            dt_proj_weight,
            dt_proj_bias,
            a_log,
            d,
            out_proj,
            channels,
            d_inner: di,
            d_state: ds,
            d_conv: k,
            dt_rank: r,
        })
    }

    /// `A = -exp(A_log)`, strictly negative.
    pub fn a_matrix(&self) -> Array2<T> {
        view2(&self.a_log).mapv(|v| -v.exp())
    }

    pub fn forward(&self, x: &Array3<T>) -> Result<Array3<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Array3<T>) -> Result<(Array3<T>, MambaCache<T>)> {
        let (bsz, n, c) = x.dim();
        if c != self.channels {
            return Err(Error::Contract(format!(
                "mamba expects {} channels, got {c}",
                self.channels
            )));
        }
        check_finite("mamba input", x.iter().copied())?;
        let (di, ds, r, k) = (self.d_inner, self.d_state, self.dt_rank, self.d_conv);
        let m = bsz * n;
        let x2 = x
            .as_standard_layout().into_owned().into_shape_with_order((m, c))
            .expect("reshape");
        let xz = x2.dot(&view2(&self.in_proj).t());
        let xs = xz
            .slice(s![.., ..di])
            .to_owned()
            .as_standard_layout().into_owned().into_shape_with_order((bsz, n, di))
            .expect("reshape");
        let z = xz.slice(s![.., di..]).to_owned();

        // Causal depthwise conv along the sequence axis.
        let cw = view2(&self.conv_weight);
        let cb = self.conv_bias.data();
        let mut xc = Array3::<T>::zeros((bsz, n, di));
        for bi in 0..bsz {
            for t in 0..n {
                for i in 0..di {
                    let mut acc = cb[i];
                    for j in 0..k {
                        let src = t as isize - (k - 1) as isize + j as isize;
                        if src >= 0 {
                            acc += cw[[i, j]] * xs[[bi, src as usize, i]];
                        }
                    }
                    xc[[bi, t, i]] = acc;
                }
            }
        }
        let xa = xc.mapv(silu);
        let xa2 = xa.view().as_standard_layout().into_owned().into_shape_with_order((m, di)).expect("reshape");
        let dbl = xa2.dot(&view2(&self.x_proj).t());
        let dt_in = dbl.slice(s![.., ..r]).to_owned();
        let bm = dbl
            .slice(s![.., r..r + ds])
            .to_owned()
            .as_standard_layout().into_owned().into_shape_with_order((bsz, n, ds))
            .expect("reshape");
        let cm = dbl
            .slice(s![.., r + ds..])
            .to_owned()
            .as_standard_layout().into_owned().into_shape_with_order((bsz, n, ds))
            .expect("reshape");
        let mut dt_pre = dt_in.dot(&view2(&self.dt_proj_weight).t());
        let dtb = self.dt_proj_bias.data();
        for mut row in dt_pre.rows_mut() {
            for (v, b) in row.iter_mut().zip(dtb) {
                *v += *b;
            }
        }
        let delta = dt_pre
            .mapv(softplus)
            .as_standard_layout().into_owned().into_shape_with_order((bsz, n, di))
            .expect("reshape");
        let a = self.a_matrix();
        let dvec = Array1::from(self.d.data().to_vec());
        let (y3, states) = scan_forward(&xa, &delta, &a, &bm, &cm, &dvec, true);
        let y = y3.as_standard_layout().into_owned().into_shape_with_order((m, di)).expect("reshape");
        let yg = &y * &z.mapv(silu);
        let out = yg.dot(&view2(&self.out_proj).t());
        let out = out.as_standard_layout().into_owned().into_shape_with_order((bsz, n, c)).expect("reshape");
        Ok((
            out,
            MambaCache {
                x2,
                xs,
                z,
                xc,
                xa,
                dt_in,
                dt_pre,
                delta,
                bm,
                cm,
                a,
                y,
                yg,
                states: states.expect("states kept"),
            },
        ))
    }

    /// Accumulates parameter gradients; returns dL/dx.
    pub fn backward(&mut self, cache: &MambaCache<T>, dout: &Array3<T>) -> Array3<T> {
        let (bsz, n, c) = dout.dim();
        let (di, ds, r, k) = (self.d_inner, self.d_state, self.dt_rank, self.d_conv);
        let m = bsz * n;
        let dout2 = dout
            .as_standard_layout().into_owned().into_shape_with_order((m, c))
            .expect("reshape");
        add_into(&mut self.out_proj, &dout2.t().dot(&cache.yg));
        let dyg = dout2.dot(&view2(&self.out_proj));
        let gate = cache.z.mapv(silu);
        let dy = &dyg * &gate;
        let mut dz = &dyg * &cache.y;
        dz.zip_mut_with(&cache.z, |g, &zv| *g *= silu_grad(zv));

        let dvec = Array1::from(self.d.data().to_vec());
        let dy3 = dy.as_standard_layout().into_owned().into_shape_with_order((bsz, n, di)).expect("reshape");
        let sg = scan_backward(
            &cache.xa,
            &cache.delta,
            &cache.a,
            &cache.bm,
            &cache.cm,
            &dvec,
            &cache.states,
            &dy3,
        );
        for (g, v) in self.d.grad_mut().iter_mut().zip(sg.dd.iter()) {
            *g += *v;
        }
        // A = -exp(A_log)  =>  dA_log = dA * A
        let da_log = &sg.da * &cache.a;
        add_into(&mut self.a_log, &da_log);

        let mut ddt_pre = sg.ddelta.as_standard_layout().into_owned().into_shape_with_order((m, di)).expect("reshape");
        ddt_pre.zip_mut_with(&cache.dt_pre, |g, &p| *g *= sigmoid(p));
        {
            let gb = self.dt_proj_bias.grad_mut();
            for row in ddt_pre.rows() {
                for (a, v) in gb.iter_mut().zip(row.iter()) {
                    *a += *v;
                }
            }
        }
        add_into(&mut self.dt_proj_weight, &ddt_pre.t().dot(&cache.dt_in));
        let ddt_in = ddt_pre.dot(&view2(&self.dt_proj_weight));

        let mut ddbl = Array2::<T>::zeros((m, r + 2 * ds));
        ddbl.slice_mut(s![.., ..r]).assign(&ddt_in);
        ddbl.slice_mut(s![.., r..r + ds])
            .assign(&sg.db.as_standard_layout().into_owned().into_shape_with_order((m, ds)).expect("reshape"));
        ddbl.slice_mut(s![.., r + ds..])
            .assign(&sg.dc.as_standard_layout().into_owned().into_shape_with_order((m, ds)).expect("reshape"));
        let xa2 = cache.xa.view().as_standard_layout().into_owned().into_shape_with_order((m, di)).expect("reshape");
        add_into(&mut self.x_proj, &ddbl.t().dot(&xa2));
        let dxa = ddbl.dot(&view2(&self.x_proj)) + sg.du.as_standard_layout().into_owned().into_shape_with_order((m, di)).expect("reshape");
        let mut dxc = dxa.as_standard_layout().into_owned().into_shape_with_order((bsz, n, di)).expect("reshape");
        dxc.zip_mut_with(&cache.xc, |g, &v| *g *= silu_grad(v));

        let cw = view2(&self.conv_weight).to_owned();
        let mut dcw = Array2::<T>::zeros((di, k));
        let mut dcb = vec![T::zero(); di];
        let mut dxs = Array3::<T>::zeros((bsz, n, di));
        for bi in 0..bsz {
            for t in 0..n {
                for i in 0..di {
                    let g = dxc[[bi, t, i]];
                    dcb[i] += g;
                    for j in 0..k {
                        let src = t as isize - (k - 1) as isize + j as isize;
                        if src >= 0 {
                            let su = src as usize;
                            dcw[[i, j]] += g * cache.xs[[bi, su, i]];
                            dxs[[bi, su, i]] += g * cw[[i, j]];
                        }
                    }
                }
            }
        }
        add_into(&mut self.conv_weight, &dcw);
        for (a, v) in self.conv_bias.grad_mut().iter_mut().zip(dcb) {
            *a += v;
        }
        let mut dxz = Array2::<T>::zeros((m, 2 * di));
        dxz.slice_mut(s![.., ..di])
            .assign(&dxs.as_standard_layout().into_owned().into_shape_with_order((m, di)).expect("reshape"));
        dxz.slice_mut(s![.., di..]).assign(&dz);
        add_into(&mut self.in_proj, &dxz.t().dot(&cache.x2));
        dxz.dot(&view2(&self.in_proj))
            .as_standard_layout().into_owned().into_shape_with_order((bsz, n, c))
            .expect("reshape")
    }

    /// Multiply-accumulates for a forward pass over `tokens` positions.
    pub fn macs(&self, tokens: usize) -> u64 {
        let (c, di, ds, r, k) = (self.channels, self.d_inner, self.d_state, self.dt_rank, self.d_conv);
        let per = c * 2 * di + di * k + di * (r + 2 * ds) + r * di + 2 * di * ds + di * c;
        (per * tokens) as u64
    }

    /// Elementwise operations (activations, gating, discretization) per forward pass.
    pub fn elementwise_ops(&self, tokens: usize) -> u64 {
        let (di, ds) = (self.d_inner, self.d_state);
        // silu(x), softplus(dt), exp(delta*A), silu(z), gate product, D skip
        ((4 * di + di * ds + di) * tokens) as u64
    }
}

impl<T: Real> Module<T> for MambaParams<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        f(&join(prefix, "in_proj"), &self.in_proj);
        f(&join(prefix, "conv_weight"), &self.conv_weight);
        f(&join(prefix, "conv_bias"), &self.conv_bias);
        f(&join(prefix, "x_proj"), &self.x_proj);
        f(&join(prefix, "dt_proj_weight"), &self.dt_proj_weight);
        f(&join(prefix, "dt_proj_bias"), &self.dt_proj_bias);
        f(&join(prefix, "a_log"), &self.a_log);
        f(&join(prefix, "d"), &self.d);
        f(&join(prefix, "out_proj"), &self.out_proj);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        f(&join(prefix, "in_proj"), &mut self.in_proj);
        f(&join(prefix, "conv_weight"), &mut self.conv_weight);
        f(&join(prefix, "conv_bias"), &mut self.conv_bias);
        f(&join(prefix, "x_proj"), &mut self.x_proj);
        f(&join(prefix, "dt_proj_weight"), &mut self.dt_proj_weight);
        f(&join(prefix, "dt_proj_bias"), &mut self.dt_proj_bias);
        f(&join(prefix, "a_log"), &mut self.a_log);
        f(&join(prefix, "d"), &mut self.d);
        f(&join(prefix, "out_proj"), &mut self.out_proj);
    }
}

/// Shared-weight bidirectional Mamba: `M(x) + flip(M(flip(x))) + gamma * x`.
///
/// Both directions run through the single `mamba` instance.
#[derive(Clone, Debug)]
pub struct BiMambaBlock<T: Real = f64> {
    pub mamba: MambaParams<T>,
    pub gamma: Param<T>,
}

#[derive(Clone, Debug)]
pub struct BiMambaCache<T> {
    x: Array3<T>,
    mamba: MambaCache<T>,
}

impl<T: Real> BiMambaBlock<T> {
    pub fn new<R: Rng + ?Sized>(channels: usize, cfg: &MambaConfig, rng: &mut R) -> Result<Self> {
        Ok(Self {
            mamba: MambaParams::new(channels, cfg, rng)?,
            gamma: Param::scalar(T::one()),
        })
    }

    pub fn forward(&self, x: &Array3<T>) -> Result<Array3<T>> {
        Ok(self.forward_cached(x)?.0)
    }

    pub fn forward_cached(&self, x: &Array3<T>) -> Result<(Array3<T>, BiMambaCache<T>)> {
        let bsz = x.dim().0;
        // Both directions in one pass: batch rows [x ; flip(x)].
        let stacked = concatenate(Axis(0), &[x.view(), flip_sequence(x).view()]).expect("same shape");
        let (m, cache) = self.mamba.forward_cached(&stacked)?;
        let fwd = m.slice(s![..bsz, .., ..]);
        let bwd = flip_sequence(&m.slice(s![bsz.., .., ..]).to_owned());
        let g = self.gamma.get();
        let out = &fwd + &bwd + &x.mapv(|v| v * g);
        Ok((
            out,
            BiMambaCache {
                x: x.clone(),
                mamba: cache,
            },
        ))
    }

    pub fn backward(&mut self, cache: &BiMambaCache<T>, dout: &Array3<T>) -> Array3<T> {
        let bsz = dout.dim().0;
        let g = self.gamma.get();
        let dg: T = dout.iter().zip(cache.x.iter()).map(|(&a, &b)| a * b).sum();
        self.gamma.grad_mut()[0] += dg;
        let dm = concatenate(Axis(0), &[dout.view(), flip_sequence(dout).view()]).expect("same shape");
        let dstack = self.mamba.backward(&cache.mamba, &dm);
        let dfwd = dstack.slice(s![..bsz, .., ..]);
        let dbwd = flip_sequence(&dstack.slice(s![bsz.., .., ..]).to_owned());
        &dfwd + &dbwd + &dout.mapv(|v| v * g)
    }
}

impl<T: Real> Module<T> for BiMambaBlock<T> {
    fn visit_params(&self, prefix: &str, f: &mut dyn FnMut(&str, &Param<T>)) {
        self.mamba.visit_params(&join(prefix, "mamba"), f);
        f(&join(prefix, "gamma"), &self.gamma);
    }
    fn visit_params_mut(&mut self, prefix: &str, f: &mut dyn FnMut(&str, &mut Param<T>)) {
        self.mamba.visit_params_mut(&join(prefix, "mamba"), f);
        f(&join(prefix, "gamma"), &mut self.gamma);
    }
}

/// Functional form of [`BiMambaBlock::forward`].
pub fn bi_mamba_forward<T: Real>(x: &Array3<T>, block: &BiMambaBlock<T>) -> Result<Array3<T>> {
    block.forward(x)
}

/// Functional form of [`MambaParams::forward`].
pub fn mamba_forward<T: Real>(x: &Array3<T>, p: &MambaParams<T>) -> Result<Array3<T>> {
    p.forward(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn ones3(b: usize, n: usize, c: usize) -> Array3<f64> {
        Array3::ones((b, n, c))
    }

    #[test]
    fn degenerate_scan_is_cumulative_sum() {
        let u = Array3::from_shape_vec((1, 3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        let a = Array2::zeros((1, 1));
        let y = selective_scan(&u, &ones3(1, 3, 1), &a, &ones3(1, 3, 1), &ones3(1, 3, 1), &Array1::zeros(1)).unwrap();
        assert_eq!(y.as_slice().unwrap(), &[1.0, 3.0, 6.0]);
    }

    #[test]
    fn vanishing_step_leaves_only_skip_path() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let u: Array3<f64> = Array3::from_shape_fn((2, 5, 3), |_| rng.random_range(-2.0..2.0));
        let delta = Array3::from_elem((2, 5, 3), 1e-14);
        let a = Array2::from_elem((3, 4), -1.0);
        let b = Array3::from_shape_fn((2, 5, 4), |_| rng.random_range(-1.0..1.0));
        let c = Array3::from_shape_fn((2, 5, 4), |_| rng.random_range(-1.0..1.0));
        let y = selective_scan(&u, &delta, &a, &b, &c, &Array1::ones(3)).unwrap();
        for (yv, uv) in y.iter().zip(u.iter()) {
            assert!((yv - uv).abs() < 1e-12);
        }
    }

    #[test]
    fn scan_rejects_bad_inputs() {
        let u = ones3(1, 4, 2);
        let a = Array2::from_elem((2, 3), -1.0);
        let bc = ones3(1, 4, 3);
        let d = Array1::ones(2);
        let bad_shape = ones3(1, 4, 3);
        assert!(matches!(
            selective_scan(&u, &bad_shape, &a, &bc, &bc, &d),
            Err(Error::Contract(_))
        ));
        let mut nan_u = u.clone();
        nan_u[[0, 1, 1]] = f64::NAN;
        assert!(matches!(
            selective_scan(&nan_u, &u, &a, &bc, &bc, &d),
            Err(Error::NonFinite(_))
        ));
        let zero_delta = Array3::zeros((1, 4, 2));
        assert!(selective_scan(&u, &zero_delta, &a, &bc, &bc, &d).is_err());
    }

    #[test]
    fn flip_is_an_involution() {
        let x = Array3::from_shape_vec((1, 3, 1), vec![1.0, 2.0, 3.0]).unwrap();
        assert_eq!(flip_sequence(&x).as_slice().unwrap(), &[3.0, 2.0, 1.0]);
        assert_eq!(flip_sequence(&flip_sequence(&x)), x);
        let single = Array3::from_shape_vec((2, 1, 2), vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        assert_eq!(flip_sequence(&single), single);
    }

    #[test]
    fn mamba_preserves_shape_and_zero_out_proj_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut p = MambaParams::<f64>::new(8, &MambaConfig::default(), &mut rng).unwrap();
        let x = Array3::from_shape_fn((1, 64, 8), |_| rng.random_range(-1.0..1.0));
        assert_eq!(p.forward(&x).unwrap().dim(), (1, 64, 8));
        p.out_proj.value.fill(0.0);
        assert!(p.forward(&x).unwrap().iter().all(|&v| v == 0.0));
        assert!(p.forward(&ones3(1, 4, 3)).is_err());
    }

    #[test]
    fn bimamba_residual_only_paths() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut blk = BiMambaBlock::<f64>::new(4, &MambaConfig::default(), &mut rng).unwrap();
        blk.mamba.out_proj.value.fill(0.0);
        let x = Array3::from_shape_fn((2, 9, 4), |_| rng.random_range(-1.0..1.0));
        assert_eq!(blk.forward(&x).unwrap(), x);
        blk.gamma.set(0.0);
        assert!(blk.forward(&x).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn bimamba_counts_one_mamba_plus_gamma() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let blk = BiMambaBlock::<f64>::new(12, &MambaConfig::default(), &mut rng).unwrap();
        assert_eq!(blk.num_params(), blk.mamba.num_params() + 1);
    }

    #[test]
    fn a_matrix_is_strictly_negative() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = MambaParams::<f32>::new(6, &MambaConfig::default(), &mut rng).unwrap();
        assert!(p.a_matrix().iter().all(|&v| v < 0.0));
    }
}
