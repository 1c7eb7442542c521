//! Correctly rounded sums and quotients of small lists of `f64`.
//!
//! Merges reduce a handful of values per coordinate. Rounding each partial
//! sum makes results depend on input order and breaks identities such as
//! `mean(v, v, v) == v`; computing the exact value and rounding once keeps
//! them.

/// Error-free partials of the exact sum (nonoverlapping, increasing
/// magnitude).
fn partials(values: impl IntoIterator<Item = f64>) -> Vec<f64> {
    let mut parts: Vec<f64> = Vec::new();
    for mut x in values {
        let mut i = 0;
        for j in 0..parts.len() {
            let mut y = parts[j];
            if x.abs() < y.abs() {
                std::mem::swap(&mut x, &mut y);
            }
            let hi = x + y;
            let lo = y - (hi - x);
            if lo != 0.0 {
                parts[i] = lo;
                i += 1;
            }
            x = hi;
        }
        parts.truncate(i);
        parts.push(x);
    }
    parts
}

/// Rounds an exact partials list to the nearest `f64`, ties to even.
fn round_partials(parts: &[f64]) -> f64 {
    let mut n = parts.len();
    if n == 0 {
        return 0.0;
    }
    n -= 1;
    let mut hi = parts[n];
    let mut lo = 0.0;
    while n > 0 {
        let x = hi;
        n -= 1;
        let y = parts[n];
        hi = x + y;
        let yr = hi - x;
        lo = y - yr;
        if lo != 0.0 {
            break;
        }
    }
    if n > 0 && ((lo < 0.0 && parts[n - 1] < 0.0) || (lo > 0.0 && parts[n - 1] > 0.0)) {
        let y = lo * 2.0;
        let x = hi + y;
        if y == x - hi {
            hi = x;
        }
    }
    hi
}

fn naive(values: &[f64]) -> f64 {
    values.iter().copied().reduce(|a, b| a + b).unwrap_or(0.0)
}

/// The exact sum of `values` rounded once to nearest.
///
/// Non-finite inputs fall back to ordinary summation. An all-zero input
/// keeps the sign ordinary summation would give.
pub fn exact_sum(values: &[f64]) -> f64 {
    if values.iter().any(|v| !v.is_finite()) {
        return naive(values);
    }
    let parts = partials(values.iter().copied());
    if parts.iter().all(|p| *p == 0.0) {
        return naive(values);
    }
    round_partials(&parts)
}

/// Sign of the exact value of `terms` (-1, 0 or 1).
fn exact_sign(terms: impl IntoIterator<Item = f64>) -> i32 {
    let r = round_partials(&partials(terms));
    if r > 0.0 {
        1
    } else if r < 0.0 {
        -1
    } else {
        0
    }
}

/// `(p, e)` with `p + e == a * b` exactly.
fn two_product(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

/// `sum(values) / divisor` computed exactly and rounded once to nearest,
/// ties to even.
pub fn exact_quotient(values: &[f64], divisor: u32) -> f64 {
    assert!(divisor > 0, "divisor must be positive");
    if divisor == 1 {
        return exact_sum(values);
    }
    if values.iter().any(|v| !v.is_finite()) {
        return naive(values) / divisor as f64;
    }
    let parts = partials(values.iter().copied());
    if parts.iter().all(|p| *p == 0.0) {
        return naive(values) / divisor as f64;
    }
    let d = divisor as f64;
    let mut q = round_partials(&parts) / d;
    // Sign of 2S - (a + b) d, i.e. of S/d relative to the midpoint of a, b.
    let twice: Vec<f64> = parts.iter().map(|p| p * 2.0).collect();
    let vs_mid = |a: f64, b: f64| {
        let (pa, ea) = two_product(a, d);
        let (pb, eb) = two_product(b, d);
        exact_sign(twice.iter().copied().chain([-pa, -ea, -pb, -eb]))
    };
    let even = |x: f64| x.to_bits() & 1 == 0;
    loop {
        let up = q.next_up();
        match vs_mid(q, up) {
            1 => {
                q = up;
                continue;
            }
            0 => return if even(q) { q } else { up },
            _ => {}
        }
        let down = q.next_down();
        match vs_mid(q, down) {
            -1 => q = down,
            0 => return if even(q) { q } else { down },
            _ => return q,
        }
    }
}
