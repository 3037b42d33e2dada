use super::{ComplexMatrix, C64, ZERO};

const SCALED_NORM: f64 = 0.5;
const TAIL: f64 = 1e-17;

/// Matrix exponential by scaling and squaring with a Taylor core.
///
/// After scaling the one-norm is at most 1/2; the Taylor degree is the
/// smallest whose first dropped term is below 1e-17, evaluated by the
/// Paterson–Stockmeyer scheme.
pub fn expm(a: &ComplexMatrix) -> ComplexMatrix {
    assert!(a.is_square(), "expm of a non-square matrix");
    let n = a.rows();
    let norm = a.one_norm();
    let squarings = if norm > SCALED_NORM { (norm / SCALED_NORM).log2().ceil() as u32 } else { 0 };
    let factor = 0.5f64.powi(squarings as i32);
    let theta = norm * factor;

    let mut degree = 1;
    let mut term = theta;
    while term > TAIL && degree < 30 {
        degree += 1;
        term *= theta / degree as f64;
    }
    let x: Vec<C64> = a.data().iter().map(|v| v * factor).collect();
    let mut t = taylor(&x, n, degree);
    let mut scratch = vec![ZERO; n * n];
    for _ in 0..squarings {
        square_mul(&t, &t, &mut scratch, n);
        std::mem::swap(&mut t, &mut scratch);
    }
    ComplexMatrix::from_vec(n, n, t).expect("finite exponential")
}

/// `out = a · b` for row-major `n × n` buffers.
fn square_mul(a: &[C64], b: &[C64], out: &mut [C64], n: usize) {
    for i in 0..n {
        let row = &mut out[i * n..(i + 1) * n];
        row.fill(ZERO);
        for l in 0..n {
            let s = a[i * n + l];
            let b_row = &b[l * n..(l + 1) * n];
            for (o, v) in row.iter_mut().zip(b_row) {
                o.re += s.re * v.re - s.im * v.im;
                o.im += s.re * v.im + s.im * v.re;
            }
        }
    }
}

fn taylor(x: &[C64], n: usize, degree: usize) -> Vec<C64> {
    let nn = n * n;
    let block = ((degree as f64).sqrt().ceil() as usize).max(1);
    // powers[k] = x^k for k = 1..=block, stored contiguously.
    let mut powers = vec![ZERO; nn * (block + 1)];
    powers[nn..2 * nn].copy_from_slice(x);
    for k in 2..=block {
        let (done, rest) = powers.split_at_mut(k * nn);
        square_mul(&done[(k - 1) * nn..], x, &mut rest[..nn], n);
    }
    let mut coef = vec![1.0; degree + 1];
    for k in 1..=degree {
        coef[k] = coef[k - 1] / k as f64;
    }
    // acc += Σ_i coef[j·block + i] x^i over the chunk j, i < block.
    let add_chunk = |acc: &mut [C64], j: usize| {
        for i in 0..block {
            let k = j * block + i;
            if k > degree {
                break;
            }
            let c = coef[k];
            if i == 0 {
                for d in 0..n {
                    acc[d * n + d] += c;
                }
            } else {
                for (o, p) in acc.iter_mut().zip(&powers[i * nn..(i + 1) * nn]) {
                    *o += p * c;
                }
            }
        }
    };
    let chunks = degree / block;
    let mut acc = vec![ZERO; nn];
    let mut scratch = vec![ZERO; nn];
    add_chunk(&mut acc, chunks);
    for j in (0..chunks).rev() {
        square_mul(&acc, &powers[block * nn..], &mut scratch, n);
        std::mem::swap(&mut acc, &mut scratch);
        add_chunk(&mut acc, j);
    }
    acc
}
