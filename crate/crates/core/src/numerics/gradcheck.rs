use super::ParamStore;

/// Per-parameter outcome of a finite-difference comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamCheck {
    pub name: String,
    pub max_rel_error: f64,
    pub checked: usize,
    /// Entries whose relative error exceeded the tolerance.
    pub flagged: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Parameter holding the worst entry.
    pub worst_param: Option<String>,
    pub params: Vec<ParamCheck>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.params.iter().all(|p| p.flagged == 0)
    }

    pub fn flagged(&self) -> usize {
        self.params.iter().map(|p| p.flagged).sum()
    }
}

/// Floor on the relative-error denominator. Central differences of an O(1)
/// loss at h = 1e-5 are quantized in steps of about ulp(loss)/2h ≈ 1e-10, so
/// entries below the floor are effectively held to an absolute bound.
pub const REL_ERROR_FLOOR: f64 = 1e-5;

pub(crate) fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_ERROR_FLOOR)
}

/// Compares the analytic gradients stored in `store` against central
/// differences of `f`, entry by entry. Parameters without a populated
/// gradient are compared against zero. Values are restored afterwards.
pub fn finite_diff_check<F>(
    mut f: F,
    store: &mut ParamStore,
    step: f64,
    tol: f64,
) -> GradCheckReport
where
    F: FnMut(&ParamStore) -> f64,
{
    let names: Vec<String> = store.names().map(str::to_owned).collect();
    let mut params = Vec::with_capacity(names.len());
    let mut worst = (0.0f64, None::<String>);

    for name in names {
        let analytic: Vec<f64> = match store.grad(&name) {
            Some(g) => g.as_slice().to_vec(),
            None => vec![0.0; store.get(&name).map_or(0, |m| m.as_slice().len())],
        };
        let mut check = ParamCheck {
            name: name.clone(),
            max_rel_error: 0.0,
            checked: 0,
            flagged: 0,
        };
        for (k, &a) in analytic.iter().enumerate() {
            let orig = store.get(&name).expect("name from store").as_slice()[k];
            store
                .get_mut(&name)
                .expect("name from store")
                .as_mut_slice()[k] = orig + step;
            let fp = f(store);
            store
                .get_mut(&name)
                .expect("name from store")
                .as_mut_slice()[k] = orig - step;
            let fm = f(store);
            store
                .get_mut(&name)
                .expect("name from store")
                .as_mut_slice()[k] = orig;

            let numeric = (fp - fm) / (2.0 * step);
            let err = relative_error(a, numeric);
            check.checked += 1;
            if !(err <= tol) {
                check.flagged += 1;
            }
            if err > check.max_rel_error || err.is_nan() {
                check.max_rel_error = err;
            }
        }
        if check.max_rel_error > worst.0 || check.max_rel_error.is_nan() {
            worst = (check.max_rel_error, Some(name));
        }
        params.push(check);
    }

    GradCheckReport {
        max_rel_error: worst.0,
        worst_param: worst.1,
        params,
        tol,
    }
}
