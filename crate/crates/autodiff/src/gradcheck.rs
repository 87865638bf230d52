//! Central finite-difference verification of `backward`.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::{AutodiffError, ParamStore, Tape, Tensor, Var};

type Grads = Vec<Vec<f64>>;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GradCheckConfig {
    /// Finite-difference step.
    pub h: f64,
    /// Pass threshold on the scaled error.
    pub tol: f64,
    /// Error is `|analytic − numeric| / max(|analytic|, |numeric|, floor)`.
    pub floor: f64,
    /// A coordinate is treated as nondifferentiable when its one-sided
    /// slopes differ by more than `kink_tol · max(1, |numeric|)`, or when
    /// central differences at `h` and `h/10` differ by more than
    /// `kink_tol · tol · max(|numeric|, floor)`.
    pub kink_tol: f64,
    /// Check at most this many coordinates per tensor, sampled with `seed`.
    pub max_coords: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        Self {
            h: 1e-4,
            tol: 1e-4,
            floor: 1e-4,
            kink_tol: 1e-1,
            max_coords: None,
            seed: 0,
        }
    }
}

/// Coordinate `index` of input tensor `tensor`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Coord {
    pub tensor: usize,
    pub index: usize,
}

#[derive(Clone, Debug, PartialEq)]
pub struct CoordError {
    pub coord: Coord,
    pub analytic: f64,
    pub numeric: f64,
    pub error: f64,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_error: f64,
    pub failures: Vec<CoordError>,
    /// Excluded coordinates where the function has a kink.
    pub kinks: Vec<Coord>,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }
}

fn scaled_error(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

fn pick_coords(len: usize, cfg: &GradCheckConfig, salt: u64) -> Vec<usize> {
    match cfg.max_coords {
        Some(max) if max < len => {
            let mut rng =
                ChaCha8Rng::seed_from_u64(cfg.seed ^ salt.wrapping_mul(0x9e37_79b9_7f4a_7c15));
            let mut idx = sample(&mut rng, len, max).into_vec();
            idx.sort_unstable();
            idx
        }
        _ => (0..len).collect(),
    }
}

struct Probe {
    plus: f64,
    minus: f64,
    plus_fine: f64,
    minus_fine: f64,
    center: f64,
}

/// Evaluates `f(x + offset)` at `±h` and `±h/10` around the center.
fn probe(
    center: f64,
    h: f64,
    mut f: impl FnMut(f64) -> Result<f64, AutodiffError>,
) -> Result<Probe, AutodiffError> {
    Ok(Probe {
        plus: f(h)?,
        minus: f(-h)?,
        plus_fine: f(h / 10.0)?,
        minus_fine: f(-h / 10.0)?,
        center,
    })
}

fn compare(
    report: &mut GradCheckReport,
    coord: Coord,
    analytic: f64,
    probe: Probe,
    cfg: &GradCheckConfig,
) {
    let numeric = (probe.plus - probe.minus) / (2.0 * cfg.h);
    let fwd = (probe.plus - probe.center) / cfg.h;
    let bwd = (probe.center - probe.minus) / cfg.h;
    let fine = (probe.plus_fine - probe.minus_fine) / (0.2 * cfg.h);
    let scale = numeric.abs().max(cfg.floor);
    // A kink inside [-h, h] but outside [-h/10, h/10] shifts the coarse
    // estimate only.
    let two_scale = (numeric - fine).abs() > cfg.kink_tol * cfg.tol * scale;
    if (fwd - bwd).abs() > cfg.kink_tol * numeric.abs().max(1.0) || two_scale {
        report.kinks.push(coord);
        return;
    }
    let error = scaled_error(analytic, numeric, cfg.floor);
    report.checked += 1;
    report.max_error = report.max_error.max(error);
    if error >= cfg.tol {
        report.failures.push(CoordError {
            coord,
            analytic,
            numeric,
            error,
        });
    }
}

fn eval_scalar(tape: &Tape, out: Var) -> Result<f64, AutodiffError> {
    if let Some(op) = tape.poisoned() {
        return Err(AutodiffError::NaNDetected(op));
    }
    let v = tape.value(out);
    if v.len() != 1 {
        return Err(AutodiffError::NonScalarLoss(tape.shape(out).to_vec()));
    }
    Ok(v[0])
}

/// Checks the gradient of scalar `f` with respect to each of `points`.
pub fn grad_check<F>(
    f: F,
    points: &[Tensor],
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &[Var]) -> Var,
{
    let run = |pts: &[Tensor], keep: bool| -> Result<(f64, Option<Grads>), AutodiffError> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = pts.iter().map(|p| tape.input(p.clone())).collect();
        let out = f(&mut tape, &vars);
        let value = eval_scalar(&tape, out)?;
        if !keep {
            return Ok((value, None));
        }
        let grads = tape.backward(out)?;
        let g = vars
            .iter()
            .zip(pts)
            .map(|(v, p)| {
                grads
                    .get(*v)
                    .map_or_else(|| vec![0.0; p.numel()], <[f64]>::to_vec)
            })
            .collect();
        Ok((value, Some(g)))
    };
    let (center, analytic) = run(points, true)?;
    let analytic = analytic.expect("gradients requested");
    let mut report = GradCheckReport::default();
    let mut work = points.to_vec();
    for (t, point) in points.iter().enumerate() {
        for index in pick_coords(point.numel(), cfg, t as u64) {
            let orig = point.data()[index];
            let probe = probe(center, cfg.h, |dx| {
                work[t].data_mut()[index] = orig + dx;
                let v = run(&work, false).map(|r| r.0);
                work[t].data_mut()[index] = orig;
                v
            })?;
            compare(
                &mut report,
                Coord { tensor: t, index },
                analytic[t][index],
                probe,
                cfg,
            );
        }
    }
    Ok(report)
}

/// Checks the gradient of scalar `f` with respect to every trainable
/// parameter in `store`. Coordinates are indexed by parameter position.
pub fn grad_check_params<F>(
    store: &mut ParamStore,
    f: F,
    cfg: &GradCheckConfig,
) -> Result<GradCheckReport, AutodiffError>
where
    F: Fn(&mut Tape, &ParamStore) -> Var,
{
    let eval = |store: &ParamStore| -> Result<f64, AutodiffError> {
        let mut tape = Tape::new();
        let out = f(&mut tape, store);
        eval_scalar(&tape, out)
    };
    let saved: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();
    store.zero_grad();
    let center = {
        let mut tape = Tape::new();
        let out = f(&mut tape, store);
        let c = eval_scalar(&tape, out)?;
        tape.backward_into(out, store)?;
        c
    };
    let analytic: Vec<Vec<f64>> = store.iter().map(|p| p.grad.clone()).collect();
    for (p, g) in store.iter_mut().zip(saved) {
        p.grad = g;
    }
    let mut report = GradCheckReport::default();
    let ids: Vec<_> = store.ids().collect();
    for (t, id) in ids.into_iter().enumerate() {
        if !store.get(id).trainable {
            continue;
        }
        let len = store.get(id).value.numel();
        for index in pick_coords(len, cfg, t as u64) {
            let orig = store.get(id).value.data()[index];
            let probe = probe(center, cfg.h, |dx| {
                store.get_mut(id).value.data_mut()[index] = orig + dx;
                let v = eval(store);
                store.get_mut(id).value.data_mut()[index] = orig;
                v
            })?;
            compare(
                &mut report,
                Coord { tensor: t, index },
                analytic[t][index],
                probe,
                cfg,
            );
        }
    }
    Ok(report)
}

type CaseFn = Box<dyn Fn(&mut Tape, &[Var]) -> Var + Send + Sync>;

/// One differentiable op wrapped into a scalar function for checking.
pub struct CatalogueCase {
    pub op: &'static str,
    pub points: Vec<Tensor>,
    pub f: CaseFn,
}

impl CatalogueCase {
    pub fn check(&self, cfg: &GradCheckConfig) -> Result<GradCheckReport, AutodiffError> {
        grad_check(&self.f, &self.points, cfg)
    }
}

/// Randomly shaped instances of every differentiable op, each reduced to a
/// scalar through a fixed random projection so no gradient is trivially
/// constant.
pub fn op_catalogue(seed: u64) -> Vec<CatalogueCase> {
    use rand::Rng;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let rand_t = |shape: &[usize], rng: &mut ChaCha8Rng| {
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    };
    let n = rng.gen_range(1..4);
    let d = rng.gen_range(2..5);
    let k = rng.gen_range(1..4);
    let mut cases = Vec::new();
    let mut project = |op: &'static str,
                       points: Vec<Tensor>,
                       out_shape: &[usize],
                       rng: &mut ChaCha8Rng,
                       body: fn(&mut Tape, &[Var]) -> Var| {
        let probe = rand_t(out_shape, rng);
        cases.push(CatalogueCase {
            op,
            points,
            f: Box::new(move |t: &mut Tape, v: &[Var]| {
                let y = body(t, v);
                let p = t.constant(probe.clone());
                let shape = t.shape(y).to_vec();
                let p = t.reshape(p, &shape);
                let m = t.mul(y, p);
                t.sum(m)
            }),
        });
    };
    let pts = vec![rand_t(&[n, d], &mut rng), rand_t(&[n, d], &mut rng)];
    project("add", pts.clone(), &[n, d], &mut rng, |t, v| {
        t.add(v[0], v[1])
    });
    project("sub", pts.clone(), &[n, d], &mut rng, |t, v| {
        t.sub(v[0], v[1])
    });
    project("mul", pts, &[n, d], &mut rng, |t, v| t.mul(v[0], v[1]));
    let pts = vec![rand_t(&[n, d], &mut rng)];
    project("scale", pts.clone(), &[n, d], &mut rng, |t, v| {
        t.scale(v[0], -1.7)
    });
    project("sum", pts.clone(), &[], &mut rng, |t, v| t.sum(v[0]));
    project("mean_all", pts.clone(), &[], &mut rng, |t, v| t.mean(v[0]));
    project("reshape", pts, &[d, n], &mut rng, |t, v| {
        t.reshape(v[0], &[t.shape(v[0])[1], t.shape(v[0])[0]])
    });
    let pts = vec![rand_t(&[n, k], &mut rng), rand_t(&[k, d], &mut rng)];
    project("matmul", pts, &[n, d], &mut rng, |t, v| {
        t.matmul(v[0], v[1])
    });
    let pts = vec![
        rand_t(&[n, k], &mut rng),
        rand_t(&[k, d], &mut rng),
        rand_t(&[d], &mut rng),
    ];
    project("affine", pts, &[n, d], &mut rng, |t, v| {
        t.affine(v[0], v[1], v[2])
    });
    // keep inputs away from the kink so every coordinate is checkable
    let mut x = rand_t(&[n, d], &mut rng);
    x.data_mut()
        .iter_mut()
        .for_each(|v| *v += 0.05f64.copysign(*v));
    project("relu", vec![x], &[n, d], &mut rng, |t, v| t.relu(v[0]));
    let pts = vec![rand_t(&[n, d], &mut rng)];
    project("tanh", pts.clone(), &[n, d], &mut rng, |t, v| t.tanh(v[0]));
    project("sigmoid", pts.clone(), &[n, d], &mut rng, |t, v| {
        t.sigmoid(v[0])
    });
    project("softmax", pts.clone(), &[n, d], &mut rng, |t, v| {
        t.softmax(v[0])
    });
    project("layer_norm", pts.clone(), &[n, d], &mut rng, |t, v| {
        t.layer_norm(v[0], 1e-5)
    });
    let pts = vec![rand_t(&[n, d], &mut rng), rand_t(&[d], &mut rng)];
    project("add_row", pts.clone(), &[n, d], &mut rng, |t, v| {
        t.add_row(v[0], v[1])
    });
    project("mul_row", pts, &[n, d], &mut rng, |t, v| {
        t.mul_row(v[0], v[1])
    });
    let (c, hw) = (rng.gen_range(1..3), rng.gen_range(4..7));
    let pts = vec![
        rand_t(&[c, hw, hw], &mut rng),
        rand_t(&[2, c, 3, 3], &mut rng),
        rand_t(&[2], &mut rng),
    ];
    let ho = (hw + 2 - 3) / 2 + 1;
    project("conv2d", pts, &[2, ho, ho], &mut rng, |t, v| {
        t.conv2d(v[0], v[1], v[2], 2, 1)
    });
    // distinct values keep each pooling window's argmax stable under ±h
    let mut perm: Vec<f64> = (0..c * 16).map(|i| i as f64 * 0.1).collect();
    use rand::seq::SliceRandom;
    perm.shuffle(&mut rng);
    let pts = vec![Tensor::new(vec![c, 4, 4], perm).unwrap()];
    project("max_pool", pts, &[c, 2, 2], &mut rng, |t, v| {
        t.max_pool2d(v[0], 2, 2)
    });
    let pts = vec![rand_t(&[n, d, 2], &mut rng)];
    project("mean", pts, &[n, 2], &mut rng, |t, v| t.mean_axis(v[0], 1));
    let pts = vec![rand_t(&[n, d], &mut rng), rand_t(&[n, k], &mut rng)];
    project("concat", pts, &[n, d + k], &mut rng, |t, v| {
        t.concat(&[v[0], v[1]], 1)
    });
    let pts = vec![rand_t(&[n, d + 1], &mut rng)];
    project("narrow", pts, &[n, d], &mut rng, |t, v| {
        t.narrow(v[0], 1, 1, t.shape(v[0])[1] - 1)
    });
    // repeated rows exercise gradient accumulation
    let pts = vec![rand_t(&[3, d], &mut rng)];
    project("gather_rows", pts, &[4, d], &mut rng, |t, v| {
        t.gather_rows(v[0], &[2, 0, 2, 1])
    });
    let (hid, inp) = (rng.gen_range(1..4), rng.gen_range(1..4));
    let pts = vec![
        rand_t(&[n, inp], &mut rng),
        rand_t(&[n, hid], &mut rng),
        rand_t(&[n, hid], &mut rng),
        rand_t(&[inp, 4 * hid], &mut rng),
        rand_t(&[hid, 4 * hid], &mut rng),
        rand_t(&[4 * hid], &mut rng),
    ];
    project("lstm_cell", pts, &[n, 2 * hid], &mut rng, |t, v| {
        t.lstm_cell(v[0], v[1], v[2], v[3], v[4], v[5])
    });
    let m = rng.gen_range(1..5);
    let pts = vec![
        rand_t(&[n, 4], &mut rng),
        rand_t(&[m, 4], &mut rng),
        rand_t(&[m, 2], &mut rng),
    ];
    project("attention", pts, &[n, 2], &mut rng, |t, v| {
        t.attention(v[0], v[1], v[2], 2)
    });
    let pts = vec![rand_t(&[n, d], &mut rng), rand_t(&[n, d], &mut rng)];
    project("mse_loss", pts, &[], &mut rng, |t, v| {
        t.mse_loss(v[0], v[1])
    });
    cases
}
