use super::{logistic, AdError, Gradients, Mat, Node, Op, Tape};

fn accumulate(grads: &mut [Option<Mat>], nodes: &[Node], idx: usize, g: Mat) {
    if !nodes[idx].needs_grad {
        return;
    }
    match &mut grads[idx] {
        Some(acc) => *acc += g,
        slot @ None => *slot = Some(g),
    }
}

fn tril(m: &Mat) -> Mat {
    m.lower_triangle()
}

/// Lower triangle with the diagonal halved.
fn phi(m: &Mat) -> Mat {
    let mut out = m.lower_triangle();
    for i in 0..out.nrows().min(out.ncols()) {
        out[(i, i)] *= 0.5;
    }
    out
}

fn solve_l(l: &Mat, b: &Mat) -> Mat {
    l.solve_lower_triangular(b)
        .expect("factor was invertible in forward pass")
}

fn solve_lt(l: &Mat, b: &Mat) -> Mat {
    l.tr_solve_lower_triangular(b)
        .expect("factor was invertible in forward pass")
}

pub(super) fn run(tape: &Tape, out: usize) -> Result<Gradients, AdError> {
    let nodes = tape.nodes();
    let out_value = &nodes[out].value;
    if (out_value.nrows(), out_value.ncols()) != (1, 1) {
        return Err(AdError::NonScalarOutput((out_value.nrows(), out_value.ncols())));
    }
    let n = nodes.len();
    let mut grads: Vec<Option<Mat>> = vec![None; n];
    grads[out] = Some(Mat::from_element(1, 1, 1.0));

    for i in (0..=out).rev() {
        let Some(g) = grads[i].take() else { continue };
        let node = &nodes[i];
        if !node.needs_grad {
            grads[i] = Some(g);
            continue;
        }
        let val = &node.value;
        match &node.op {
            Op::Leaf | Op::Constant | Op::Poison => {}
            Op::Add(a, b) => {
                accumulate(&mut grads, &nodes, *a, g.clone());
                accumulate(&mut grads, &nodes, *b, g.clone());
            }
            Op::Sub(a, b) => {
                accumulate(&mut grads, &nodes, *a, g.clone());
                accumulate(&mut grads, &nodes, *b, -&g);
            }
            Op::Neg(a) => accumulate(&mut grads, &nodes, *a, -&g),
            Op::Scale(a, f) => accumulate(&mut grads, &nodes, *a, &g * *f),
            Op::Offset(a) => accumulate(&mut grads, &nodes, *a, g.clone()),
            Op::MulScalar(a, s) => {
                let sv = nodes[*s].value[(0, 0)];
                let av = &nodes[*a].value;
                accumulate(&mut grads, &nodes, *s, Mat::from_element(1, 1, g.dot(av)));
                accumulate(&mut grads, &nodes, *a, &g * sv);
            }
            Op::Hadamard(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                accumulate(&mut grads, &nodes, *a, g.component_mul(bv));
                accumulate(&mut grads, &nodes, *b, g.component_mul(av));
            }
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                if nodes[*a].needs_grad {
                    accumulate(&mut grads, &nodes, *a, &g * bv.transpose());
                }
                if nodes[*b].needs_grad {
                    accumulate(&mut grads, &nodes, *b, av.transpose() * &g);
                }
            }
            Op::Transpose(a) => accumulate(&mut grads, &nodes, *a, g.transpose()),
            Op::Exp(a) => accumulate(&mut grads, &nodes, *a, g.component_mul(val)),
            Op::Log(a) => {
                let av = &nodes[*a].value;
                accumulate(&mut grads, &nodes, *a, g.component_div(av));
            }
            Op::Sqrt(a) => {
                let d = g.zip_map(val, |gi, s| 0.5 * gi / s);
                accumulate(&mut grads, &nodes, *a, d);
            }
            Op::Logistic(a) => {
                let d = g.zip_map(val, |gi, s| gi * s * (1.0 - s));
                accumulate(&mut grads, &nodes, *a, d);
            }
            Op::LogSigmoid(a) => {
                let av = &nodes[*a].value;
                let d = g.zip_map(av, |gi, x| gi * logistic(-x));
                accumulate(&mut grads, &nodes, *a, d);
            }
            Op::Square(a) => {
                let av = &nodes[*a].value;
                let d = g.zip_map(av, |gi, x| 2.0 * gi * x);
                accumulate(&mut grads, &nodes, *a, d);
            }
            Op::Sum(a) => {
                let av = &nodes[*a].value;
                let d = Mat::from_element(av.nrows(), av.ncols(), g[(0, 0)]);
                accumulate(&mut grads, &nodes, *a, d);
            }
            Op::Trace(a) => {
                let k = nodes[*a].value.nrows();
                accumulate(&mut grads, &nodes, *a, Mat::identity(k, k) * g[(0, 0)]);
            }
            Op::DiagPart(a) => {
                let d = Mat::from_diagonal(&g.column(0).into_owned());
                accumulate(&mut grads, &nodes, *a, d);
            }
            Op::DiagEmbed(a) => {
                let d = g.diagonal();
                accumulate(&mut grads, &nodes, *a, Mat::from_column_slice(d.len(), 1, d.as_slice()));
            }
            Op::Cholesky(a) => {
                let l = val;
                let p = phi(&(l.transpose() * tril(&g)));
                // S = L^{-T} P L^{-1}
                let x = solve_lt(l, &p);
                let s = solve_lt(l, &x.transpose()).transpose();
                let sym = (&s + s.transpose()) * 0.5;
                accumulate(&mut grads, &nodes, *a, sym);
            }
            Op::SolveLower { l, b, transpose } => {
                let lv = &nodes[*l].value;
                if *transpose {
                    let b_bar = solve_l(lv, &g);
                    if nodes[*l].needs_grad {
                        let l_bar = -tril(&(val * b_bar.transpose()));
                        accumulate(&mut grads, &nodes, *l, l_bar);
                    }
                    accumulate(&mut grads, &nodes, *b, b_bar);
                } else {
                    let b_bar = solve_lt(lv, &g);
                    if nodes[*l].needs_grad {
                        let l_bar = -tril(&(&b_bar * val.transpose()));
                        accumulate(&mut grads, &nodes, *l, l_bar);
                    }
                    accumulate(&mut grads, &nodes, *b, b_bar);
                }
            }
            Op::LogDetChol(a) => {
                let lv = &nodes[*a].value;
                let k = lv.nrows();
                let mut d = Mat::zeros(k, k);
                for j in 0..k {
                    d[(j, j)] = 2.0 * g[(0, 0)] / lv[(j, j)];
                }
                accumulate(&mut grads, &nodes, *a, d);
            }
            Op::SqDist(a, b) => {
                let (av, bv) = (&nodes[*a].value, &nodes[*b].value);
                if nodes[*a].needs_grad {
                    let mut da = -(&g * bv);
                    for r in 0..av.nrows() {
                        let rs: f64 = g.row(r).sum();
                        for c in 0..av.ncols() {
                            da[(r, c)] += rs * av[(r, c)];
                        }
                    }
                    accumulate(&mut grads, &nodes, *a, da * 2.0);
                }
                if nodes[*b].needs_grad {
                    let mut db = -(g.transpose() * av);
                    for r in 0..bv.nrows() {
                        let cs: f64 = g.column(r).sum();
                        for c in 0..bv.ncols() {
                            db[(r, c)] += cs * bv[(r, c)];
                        }
                    }
                    accumulate(&mut grads, &nodes, *b, db * 2.0);
                }
            }
            Op::SelectRows(a, idx) => {
                let av = &nodes[*a].value;
                let mut d = Mat::zeros(av.nrows(), av.ncols());
                for (row, &src) in idx.iter().enumerate() {
                    let mut target = d.row_mut(src);
                    target += g.row(row);
                }
                accumulate(&mut grads, &nodes, *a, d);
            }
            Op::Column(a, j) => {
                let av = &nodes[*a].value;
                let mut d = Mat::zeros(av.nrows(), av.ncols());
                d.column_mut(*j).copy_from(&g.column(0));
                accumulate(&mut grads, &nodes, *a, d);
            }
            Op::HCat(a, b) => {
                let wa = nodes[*a].value.ncols();
                let wb = nodes[*b].value.ncols();
                accumulate(&mut grads, &nodes, *a, g.columns(0, wa).into_owned());
                accumulate(&mut grads, &nodes, *b, g.columns(wa, wb).into_owned());
            }
        }
        grads[i] = Some(g);
    }

    let shapes = nodes
        .iter()
        .map(|node| (node.value.nrows(), node.value.ncols()))
        .collect();
    Ok(Gradients { grads, shapes })
}
