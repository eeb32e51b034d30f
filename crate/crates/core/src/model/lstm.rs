use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};

use super::math::sigmoid;
use super::params::LstmParams;

/// Activations kept from a forward pass over a whole sequence.
#[derive(Debug, Clone)]
pub struct LstmTrace {
    pub inputs: Array2<f64>,
    pub h_prev: Array2<f64>,
    pub c_prev: Array2<f64>,
    pub gates: Array2<f64>,
    pub c: Array2<f64>,
    pub tanh_c: Array2<f64>,
    pub h: Array2<f64>,
}

impl LstmTrace {
    pub fn len(&self) -> usize {
        self.h.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.h.nrows() == 0
    }

    pub fn last_h(&self) -> Array1<f64> {
        self.h.row(self.len() - 1).to_owned()
    }

    pub fn last_c(&self) -> Array1<f64> {
        self.c.row(self.len() - 1).to_owned()
    }
}

/// Applies the gate nonlinearities in place and returns the new (h, c).
fn cell(pre: &mut Array1<f64>, c_prev: ArrayView1<'_, f64>) -> (Array1<f64>, Array1<f64>, Array1<f64>) {
    let hidden = c_prev.len();
    for (k, a) in pre.iter_mut().enumerate() {
        *a = if (2 * hidden..3 * hidden).contains(&k) {
            a.tanh()
        } else {
            sigmoid(*a)
        };
    }
    let i = pre.slice(s![..hidden]);
    let f = pre.slice(s![hidden..2 * hidden]);
    let g = pre.slice(s![2 * hidden..3 * hidden]);
    let o = pre.slice(s![3 * hidden..]);
    let c = &f * &c_prev + &i * &g;
    let tanh_c = c.mapv(f64::tanh);
    let h = &o * &tanh_c;
    (h, c, tanh_c)
}

/// One recurrent step.
pub fn step(
    params: &LstmParams,
    x: ArrayView1<'_, f64>,
    h: ArrayView1<'_, f64>,
    c: ArrayView1<'_, f64>,
) -> (Array1<f64>, Array1<f64>) {
    let mut pre = params.w_x.dot(&x) + params.w_h.dot(&h) + &params.b;
    let (h, c, _) = cell(&mut pre, c);
    (h, c)
}

/// Runs the cell over every row of `inputs`.
pub fn forward(params: &LstmParams, inputs: Array2<f64>, h0: ArrayView1<'_, f64>, c0: ArrayView1<'_, f64>) -> LstmTrace {
    let steps = inputs.nrows();
    let hidden = params.hidden();
    let projected = inputs.dot(&params.w_x.t()) + &params.b;
    let mut trace = LstmTrace {
        inputs,
        h_prev: Array2::zeros((steps, hidden)),
        c_prev: Array2::zeros((steps, hidden)),
        gates: Array2::zeros((steps, 4 * hidden)),
        c: Array2::zeros((steps, hidden)),
        tanh_c: Array2::zeros((steps, hidden)),
        h: Array2::zeros((steps, hidden)),
    };
    let mut h = h0.to_owned();
    let mut c = c0.to_owned();
    for t in 0..steps {
        trace.h_prev.row_mut(t).assign(&h);
        trace.c_prev.row_mut(t).assign(&c);
        let mut pre = &projected.row(t) + &params.w_h.dot(&h);
        let (h_new, c_new, tanh_c) = cell(&mut pre, c.view());
        trace.gates.row_mut(t).assign(&pre);
        trace.c.row_mut(t).assign(&c_new);
        trace.tanh_c.row_mut(t).assign(&tanh_c);
        trace.h.row_mut(t).assign(&h_new);
        h = h_new;
        c = c_new;
    }
    trace
}

/// Backpropagation through time.
///
/// `dh` holds the loss gradient reaching each step's output from outside
/// the recurrence; `dh_last`/`dc_last` are extra gradients on the final
/// state. Parameter gradients are accumulated into `grads`. Returns the
/// gradients w.r.t. the inputs and the initial state.
pub fn backward(
    params: &LstmParams,
    trace: &LstmTrace,
    dh: ArrayView2<'_, f64>,
    dh_last: ArrayView1<'_, f64>,
    dc_last: ArrayView1<'_, f64>,
    grads: &mut LstmParams,
) -> (Array2<f64>, Array1<f64>, Array1<f64>) {
    let steps = trace.len();
    let hidden = params.hidden();
    let mut d_pre = Array2::<f64>::zeros((steps, 4 * hidden));
    let mut dh_next = dh_last.to_owned();
    let mut dc_next = dc_last.to_owned();
    for t in (0..steps).rev() {
        let gates = trace.gates.row(t);
        let i = gates.slice(s![..hidden]);
        let f = gates.slice(s![hidden..2 * hidden]);
        let g = gates.slice(s![2 * hidden..3 * hidden]);
        let o = gates.slice(s![3 * hidden..]);
        let tanh_c = trace.tanh_c.row(t);
        let dh_t = &dh.row(t) + &dh_next;
        let d_o = &dh_t * &tanh_c;
        let dc = &dc_next + &(&dh_t * &o * &tanh_c.mapv(|x| 1.0 - x * x));
        let d_i = &dc * &g;
        let d_g = &dc * &i;
        let d_f = &dc * &trace.c_prev.row(t);
        let mut row = d_pre.row_mut(t);
        for k in 0..hidden {
            row[k] = d_i[k] * i[k] * (1.0 - i[k]);
            row[hidden + k] = d_f[k] * f[k] * (1.0 - f[k]);
            row[2 * hidden + k] = d_g[k] * (1.0 - g[k] * g[k]);
            row[3 * hidden + k] = d_o[k] * o[k] * (1.0 - o[k]);
        }
        dc_next = &dc * &f;
        dh_next = params.w_h.t().dot(&row);
    }
    grads.w_x += &d_pre.t().dot(&trace.inputs);
    grads.w_h += &d_pre.t().dot(&trace.h_prev);
    grads.b += &d_pre.sum_axis(Axis(0));
    let d_inputs = d_pre.dot(&params.w_x);
    (d_inputs, dh_next, dc_next)
}
