//! Record/replay bytecode tape for matrix-free reverse-mode differentiation.
//!
//! A right-hand side `F(u, alpha, t)` is recorded once through operator
//! overloading into a flat, topologically ordered instruction list over value
//! slots. Replaying the list evaluates `F` at arbitrary numeric inputs;
//! sweeping it backwards accumulates vector-Jacobian products `lambda^T dF/du`
//! and `lambda^T dF/dalpha` without ever forming the Jacobian. Reverse sweeps
//! are lane-batched: up to eight seed vectors propagate through one sweep,
//! with each lane arithmetically independent of the others.
//!
//! The model supports a fixed set of elementary operations and only
//! input-independent control flow. Branching on a recorded value cannot be
//! expressed; see [`Expr::compare`]. Replay is deterministic: the same inputs
//! produce bitwise identical outputs on every call.

use std::cell::RefCell;
use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};

use ndarray::Array2;

use crate::error::{Error, Result};
use crate::real::Real;

/// Widest supported lane batch for reverse sweeps.
pub const MAX_LANES: usize = 8;

/// One tape instruction. Operands are slot indices into the value buffer;
/// the result lands in the slot that owns the instruction.
#[derive(Debug, Clone, Copy, PartialEq)]
enum Instr<T> {
    Const(T),
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Div(u32, u32),
    Neg(u32),
    Exp(u32),
    Ln(u32),
    Sin(u32),
    Cos(u32),
    /// Power with a constant exponent.
    Pow(u32, T),
}

struct RecState<T> {
    n_state: usize,
    n_param: usize,
    instrs: Vec<Instr<T>>,
    /// Constant value per slot when known at record time, used for folding.
    const_of: Vec<Option<T>>,
}

/// Recording context handed to the builder closure of [`record`].
///
/// Input handles come from [`Recorder::state`], [`Recorder::param`], and
/// [`Recorder::time`]; arithmetic on the returned [`Expr`] values appends
/// instructions to the tape.
pub struct Recorder<T> {
    state: RefCell<RecState<T>>,
}

impl<T: Real> Recorder<T> {
    fn new(n_state: usize, n_param: usize) -> Self {
        let n_inputs = n_state + n_param + 1;
        Recorder {
            state: RefCell::new(RecState {
                n_state,
                n_param,
                instrs: Vec::new(),
                const_of: vec![None; n_inputs],
            }),
        }
    }

    /// Handle for state component `i`.
    pub fn state(&self, i: usize) -> Expr<'_, T> {
        let n = self.state.borrow().n_state;
        assert!(i < n, "state index {i} out of range for {n} components");
        Expr {
            rec: self,
            slot: i as u32,
        }
    }

    /// Handle for parameter `k`.
    pub fn param(&self, k: usize) -> Expr<'_, T> {
        let st = self.state.borrow();
        assert!(
            k < st.n_param,
            "parameter index {k} out of range for {} parameters",
            st.n_param
        );
        Expr {
            rec: self,
            slot: (st.n_state + k) as u32,
        }
    }

    /// Handle for the time input.
    pub fn time(&self) -> Expr<'_, T> {
        let st = self.state.borrow();
        Expr {
            rec: self,
            slot: (st.n_state + st.n_param) as u32,
        }
    }

    /// Records a constant.
    pub fn constant(&self, value: T) -> Expr<'_, T> {
        self.push(Instr::Const(value), Some(value))
    }

    fn push(&self, instr: Instr<T>, const_val: Option<T>) -> Expr<'_, T> {
        let mut st = self.state.borrow_mut();
        let slot = st.const_of.len() as u32;
        st.instrs.push(instr);
        st.const_of.push(const_val);
        Expr { rec: self, slot }
    }

    fn const_of(&self, slot: u32) -> Option<T> {
        self.state.borrow().const_of[slot as usize]
    }

    /// Appends a binary operation, folding it when both operands are record
    /// time constants.
    fn binary(&self, a: u32, b: u32, make: fn(u32, u32) -> Instr<T>, eval: fn(T, T) -> T) -> Expr<'_, T> {
        match (self.const_of(a), self.const_of(b)) {
            (Some(x), Some(y)) => self.constant(eval(x, y)),
            _ => self.push(make(a, b), None),
        }
    }

    fn unary(&self, a: u32, make: fn(u32) -> Instr<T>, eval: fn(T) -> T) -> Expr<'_, T> {
        match self.const_of(a) {
            Some(x) => self.constant(eval(x)),
            None => self.push(make(a), None),
        }
    }
}

/// Handle to a recorded value. Cheap to copy; arithmetic between handles
/// appends instructions to the owning [`Recorder`].
#[derive(Clone, Copy)]
pub struct Expr<'a, T> {
    rec: &'a Recorder<T>,
    slot: u32,
}

impl<'a, T: Real> Expr<'a, T> {
    /// e^x
    pub fn exp(self) -> Self {
        self.rec.unary(self.slot, Instr::Exp, |x| x.exp())
    }

    /// Natural logarithm.
    pub fn ln(self) -> Self {
        self.rec.unary(self.slot, Instr::Ln, |x| x.ln())
    }

    pub fn sin(self) -> Self {
        self.rec.unary(self.slot, Instr::Sin, |x| x.sin())
    }

    pub fn cos(self) -> Self {
        self.rec.unary(self.slot, Instr::Cos, |x| x.cos())
    }

    /// x^e with a constant exponent.
    pub fn pow(self, exponent: T) -> Self {
        match self.rec.const_of(self.slot) {
            Some(x) => self.rec.constant(x.powf(exponent)),
            None => self.rec.push(Instr::Pow(self.slot, exponent), None),
        }
    }

    /// Ordering of two recorded values.
    ///
    /// Always fails: the tape records a single execution path, so control flow
    /// that depends on runtime values cannot be replayed. The method exists so
    /// that builder code which needs a data-dependent branch gets a clear
    /// error instead of silently recording one side of the branch.
    pub fn compare(self, _other: Self) -> Result<Ordering> {
        Err(Error::Recording(
            "comparison of runtime values (data-dependent control flow is not replayable)".into(),
        ))
    }
}

macro_rules! expr_binop {
    ($trait:ident, $method:ident, $instr:ident, $op:tt) => {
        impl<'a, T: Real> $trait for Expr<'a, T> {
            type Output = Expr<'a, T>;
            fn $method(self, rhs: Self) -> Self::Output {
                self.rec
                    .binary(self.slot, rhs.slot, Instr::$instr, |x, y| x $op y)
            }
        }

        impl<'a, T: Real> $trait<T> for Expr<'a, T> {
            type Output = Expr<'a, T>;
            fn $method(self, rhs: T) -> Self::Output {
                let rhs = self.rec.constant(rhs);
                self $op rhs
            }
        }
    };
}

expr_binop!(Add, add, Add, +);
expr_binop!(Sub, sub, Sub, -);
expr_binop!(Mul, mul, Mul, *);
expr_binop!(Div, div, Div, /);

impl<'a, T: Real> Neg for Expr<'a, T> {
    type Output = Expr<'a, T>;
    fn neg(self) -> Self::Output {
        self.rec.unary(self.slot, Instr::Neg, |x| -x)
    }
}

/// Immutable recorded program for one vector function of `(u, alpha, t)`.
///
/// Slot layout: `0..n_state` holds `u`, then `n_param` parameter slots, then
/// one time slot, then one result slot per instruction. Instructions only
/// reference earlier slots, so a single forward pass evaluates the program.
#[derive(Debug, Clone)]
pub struct Tape<T> {
    n_state: usize,
    n_param: usize,
    instrs: Vec<Instr<T>>,
    outputs: Vec<u32>,
}

/// Records a tape by running `build` against a fresh [`Recorder`].
///
/// The closure receives the recorder and returns the output expressions, one
/// per component of the recorded function. For a right-hand side tape the
/// output count must equal `n_state`; integrand tapes may have any output
/// count.
pub fn record<T, F>(n_state: usize, n_param: usize, build: F) -> Result<Tape<T>>
where
    T: Real,
    F: FnOnce(&Recorder<T>) -> Result<Vec<Expr<'_, T>>>,
{
    if n_state == 0 {
        return Err(Error::Recording("a tape needs at least one state slot".into()));
    }
    let recorder = Recorder::new(n_state, n_param);
    let outputs = build(&recorder)?;
    if outputs.is_empty() {
        return Err(Error::Recording("builder returned no outputs".into()));
    }
    let slots: Vec<u32> = outputs.iter().map(|e| e.slot).collect();
    let st = recorder.state.into_inner();
    Ok(Tape {
        n_state,
        n_param,
        instrs: st.instrs,
        outputs: slots,
    })
}

impl<T: Real> Tape<T> {
    /// Number of state inputs `N`.
    pub fn n_state(&self) -> usize {
        self.n_state
    }

    /// Number of parameter inputs `P`.
    pub fn n_param(&self) -> usize {
        self.n_param
    }

    /// Number of recorded outputs.
    pub fn n_out(&self) -> usize {
        self.outputs.len()
    }

    /// Number of instructions.
    pub fn len(&self) -> usize {
        self.instrs.len()
    }

    /// True for a tape with no instructions (outputs are plain inputs).
    pub fn is_empty(&self) -> bool {
        self.instrs.is_empty()
    }

    /// Total slot count: inputs, time, and one result slot per instruction.
    pub fn n_slots(&self) -> usize {
        self.n_state + self.n_param + 1 + self.instrs.len()
    }

    fn base(&self) -> usize {
        self.n_state + self.n_param + 1
    }

    /// Structural sanity check: every operand references an earlier slot and
    /// every output references a valid slot.
    pub fn validate(&self) -> Result<()> {
        let base = self.base();
        let check = |arg: u32, own: usize| -> Result<()> {
            if (arg as usize) < own {
                Ok(())
            } else {
                Err(Error::Recording(format!(
                    "instruction at slot {own} references slot {arg}"
                )))
            }
        };
        for (i, instr) in self.instrs.iter().enumerate() {
            let own = base + i;
            match *instr {
                Instr::Const(_) => {}
                Instr::Add(a, b) | Instr::Sub(a, b) | Instr::Mul(a, b) | Instr::Div(a, b) => {
                    check(a, own)?;
                    check(b, own)?;
                }
                Instr::Neg(a)
                | Instr::Exp(a)
                | Instr::Ln(a)
                | Instr::Sin(a)
                | Instr::Cos(a)
                | Instr::Pow(a, _) => check(a, own)?,
            }
        }
        let n_slots = self.n_slots();
        for &o in &self.outputs {
            if o as usize >= n_slots {
                return Err(Error::Recording(format!("output references slot {o}")));
            }
        }
        Ok(())
    }
}

/// Scratch buffers for replaying one tape: a value buffer for the forward
/// pass and a lane-major adjoint buffer for reverse sweeps.
///
/// The workspace remembers that a forward evaluation has primed the value
/// buffer; reverse sweeps reuse those values as the linearisation point, so
/// several sweeps (for different seed batches) can share one forward pass.
#[derive(Debug, Clone)]
pub struct ReplayWorkspace<T> {
    values: Vec<T>,
    /// Lane-major: the adjoint of slot `s` in lane `l` lives at `s * lanes + l`.
    adjoints: Vec<T>,
    /// Slots whose adjoints may be nonzero after a sweep; used to restore the
    /// all-zero state without wiping the whole buffer.
    touched: Vec<u32>,
    lanes: usize,
    primed: bool,
}

impl<T: Real> ReplayWorkspace<T> {
    /// Allocates buffers sized for `tape` with `lanes` reverse lanes (1 to 8).
    pub fn new(tape: &Tape<T>, lanes: usize) -> Result<Self> {
        if lanes == 0 || lanes > MAX_LANES {
            return Err(Error::Config(format!(
                "lane count must be between 1 and {MAX_LANES}, got {lanes}"
            )));
        }
        let n_slots = tape.n_slots();
        Ok(ReplayWorkspace {
            values: vec![T::zero(); n_slots],
            adjoints: vec![T::zero(); n_slots * lanes],
            touched: Vec::new(),
            lanes,
            primed: false,
        })
    }

    /// Configured lane count.
    pub fn lanes(&self) -> usize {
        self.lanes
    }

    /// Value of a slot after the last forward evaluation. Test hook.
    pub fn value(&self, slot: usize) -> T {
        self.values[slot]
    }

    fn check_tape(&self, tape: &Tape<T>) -> Result<()> {
        if self.values.len() != tape.n_slots() {
            return Err(Error::Dimension {
                what: "workspace slots",
                expected: tape.n_slots(),
                got: self.values.len(),
            });
        }
        Ok(())
    }
}

/// Batch of reverse-sweep seed vectors, one per lane.
///
/// Seeds are stored lane-major; unused lanes stay zero and their results are
/// ignored by callers, which is how output counts that are not a multiple of
/// the lane width are handled.
#[derive(Debug, Clone)]
pub struct LaneBatch<T> {
    width: usize,
    seed_len: usize,
    seeds: Vec<T>,
}

impl<T: Real> LaneBatch<T> {
    /// Zero-initialised batch of `width` seed vectors of length `seed_len`.
    pub fn new(width: usize, seed_len: usize) -> Result<Self> {
        if width == 0 || width > MAX_LANES {
            return Err(Error::Config(format!(
                "lane count must be between 1 and {MAX_LANES}, got {width}"
            )));
        }
        Ok(LaneBatch {
            width,
            seed_len,
            seeds: vec![T::zero(); width * seed_len],
        })
    }

    pub fn width(&self) -> usize {
        self.width
    }

    pub fn seed_len(&self) -> usize {
        self.seed_len
    }

    /// Overwrites the seed vector of one lane.
    pub fn set_lane(&mut self, lane: usize, seed: &[T]) -> Result<()> {
        if lane >= self.width {
            return Err(Error::Dimension {
                what: "lane index",
                expected: self.width,
                got: lane,
            });
        }
        if seed.len() != self.seed_len {
            return Err(Error::Dimension {
                what: "seed length",
                expected: self.seed_len,
                got: seed.len(),
            });
        }
        self.seeds[lane * self.seed_len..(lane + 1) * self.seed_len].copy_from_slice(seed);
        Ok(())
    }

    /// Seed vector of one lane.
    pub fn lane(&self, lane: usize) -> &[T] {
        &self.seeds[lane * self.seed_len..(lane + 1) * self.seed_len]
    }

    /// Resets every lane to zero.
    pub fn zero(&mut self) {
        self.seeds.fill(T::zero());
    }
}

/// Replays `tape` at `(u, alpha, t)` and returns the outputs.
///
/// Also primes `ws` so that subsequent [`reverse_vjp`] calls linearise at this
/// point. Evaluation is deterministic: repeated calls with the same inputs
/// produce bitwise identical results.
pub fn forward_eval<T: Real>(
    tape: &Tape<T>,
    ws: &mut ReplayWorkspace<T>,
    u: &[T],
    alpha: &[T],
    t: T,
) -> Result<Vec<T>> {
    let mut out = vec![T::zero(); tape.n_out()];
    forward_eval_into(tape, ws, u, alpha, t, &mut out)?;
    Ok(out)
}

/// Non-allocating variant of [`forward_eval`].
pub fn forward_eval_into<T: Real>(
    tape: &Tape<T>,
    ws: &mut ReplayWorkspace<T>,
    u: &[T],
    alpha: &[T],
    t: T,
    out: &mut [T],
) -> Result<()> {
    ws.check_tape(tape)?;
    if u.len() != tape.n_state {
        return Err(Error::Dimension {
            what: "state vector",
            expected: tape.n_state,
            got: u.len(),
        });
    }
    if alpha.len() != tape.n_param {
        return Err(Error::Dimension {
            what: "parameter vector",
            expected: tape.n_param,
            got: alpha.len(),
        });
    }
    if out.len() != tape.n_out() {
        return Err(Error::Dimension {
            what: "output vector",
            expected: tape.n_out(),
            got: out.len(),
        });
    }

    let vals = &mut ws.values;
    vals[..tape.n_state].copy_from_slice(u);
    vals[tape.n_state..tape.n_state + tape.n_param].copy_from_slice(alpha);
    vals[tape.n_state + tape.n_param] = t;

    let base = tape.base();
    for (i, instr) in tape.instrs.iter().enumerate() {
        let v = match *instr {
            Instr::Const(c) => c,
            Instr::Add(a, b) => vals[a as usize] + vals[b as usize],
            Instr::Sub(a, b) => vals[a as usize] - vals[b as usize],
            Instr::Mul(a, b) => vals[a as usize] * vals[b as usize],
            Instr::Div(a, b) => vals[a as usize] / vals[b as usize],
            Instr::Neg(a) => -vals[a as usize],
            Instr::Exp(a) => vals[a as usize].exp(),
            Instr::Ln(a) => vals[a as usize].ln(),
            Instr::Sin(a) => vals[a as usize].sin(),
            Instr::Cos(a) => vals[a as usize].cos(),
            Instr::Pow(a, e) => vals[a as usize].powf(e),
        };
        vals[base + i] = v;
    }

    for (o, &slot) in out.iter_mut().zip(&tape.outputs) {
        *o = vals[slot as usize];
    }
    ws.primed = true;
    Ok(())
}

/// Lane-batched vector-Jacobian products at the last forward evaluation point.
///
/// For each lane seed `lambda` the sweep accumulates `lambda^T dF/du` and
/// `lambda^T dF/dalpha`. Returns the pair `(state_vjps, param_vjps)`, both
/// lane-major (`width * n_state` and `width * n_param`). Lanes are
/// arithmetically independent: a value in lane `l` is identical no matter
/// which other seeds share the batch, which makes results invariant to the
/// configured lane width.
pub fn reverse_vjp<T: Real>(
    tape: &Tape<T>,
    ws: &mut ReplayWorkspace<T>,
    seeds: &LaneBatch<T>,
) -> Result<(Vec<T>, Vec<T>)> {
    let mut x_out = vec![T::zero(); seeds.width() * tape.n_state];
    let mut a_out = vec![T::zero(); seeds.width() * tape.n_param];
    reverse_vjp_into(tape, ws, seeds, &mut x_out, &mut a_out)?;
    Ok((x_out, a_out))
}

/// Non-allocating variant of [`reverse_vjp`].
pub fn reverse_vjp_into<T: Real>(
    tape: &Tape<T>,
    ws: &mut ReplayWorkspace<T>,
    seeds: &LaneBatch<T>,
    x_out: &mut [T],
    a_out: &mut [T],
) -> Result<()> {
    ws.check_tape(tape)?;
    if !ws.primed {
        return Err(Error::WorkspaceNotPrimed);
    }
    let w = ws.lanes;
    if seeds.width() != w {
        return Err(Error::Dimension {
            what: "seed batch width",
            expected: w,
            got: seeds.width(),
        });
    }
    if seeds.seed_len() != tape.n_out() {
        return Err(Error::Dimension {
            what: "seed length",
            expected: tape.n_out(),
            got: seeds.seed_len(),
        });
    }
    if x_out.len() != w * tape.n_state {
        return Err(Error::Dimension {
            what: "state vjp buffer",
            expected: w * tape.n_state,
            got: x_out.len(),
        });
    }
    if a_out.len() != w * tape.n_param {
        return Err(Error::Dimension {
            what: "parameter vjp buffer",
            expected: w * tape.n_param,
            got: a_out.len(),
        });
    }

    let zero = T::zero();
    let vals = &ws.values;
    let adj = &mut ws.adjoints;
    let touched = &mut ws.touched;

    // Seed the output slots. Outputs may alias input slots or each other;
    // accumulation handles both.
    for (j, &slot) in tape.outputs.iter().enumerate() {
        let mut any = false;
        for l in 0..w {
            let s = seeds.seeds[l * seeds.seed_len + j];
            if s != zero {
                adj[slot as usize * w + l] += s;
                any = true;
            }
        }
        if any {
            touched.push(slot);
        }
    }

    // Backward sweep. Each instruction reads the adjoint of its own slot and
    // scatters into its operands. Lanes with a zero adjoint are skipped
    // per lane, so the arithmetic a lane sees never depends on what the other
    // lanes carry.
    let base = tape.base();
    let mut gbuf = [zero; MAX_LANES];
    for (i, instr) in tape.instrs.iter().enumerate().rev() {
        let row = (base + i) * w;
        let mut any = false;
        for l in 0..w {
            let g = adj[row + l];
            gbuf[l] = g;
            any |= g != zero;
        }
        if !any {
            continue;
        }
        match *instr {
            Instr::Const(_) => {}
            Instr::Add(a, b) => {
                let (aw, bw) = (a as usize * w, b as usize * w);
                for l in 0..w {
                    let g = gbuf[l];
                    if g != zero {
                        adj[aw + l] += g;
                        adj[bw + l] += g;
                    }
                }
                touched.push(a);
                touched.push(b);
            }
            Instr::Sub(a, b) => {
                let (aw, bw) = (a as usize * w, b as usize * w);
                for l in 0..w {
                    let g = gbuf[l];
                    if g != zero {
                        adj[aw + l] += g;
                        adj[bw + l] -= g;
                    }
                }
                touched.push(a);
                touched.push(b);
            }
            Instr::Mul(a, b) => {
                let va = vals[a as usize];
                let vb = vals[b as usize];
                let (aw, bw) = (a as usize * w, b as usize * w);
                for l in 0..w {
                    let g = gbuf[l];
                    if g != zero {
                        adj[aw + l] += g * vb;
                        adj[bw + l] += g * va;
                    }
                }
                touched.push(a);
                touched.push(b);
            }
            Instr::Div(a, b) => {
                let inv = T::one() / vals[b as usize];
                let rv = vals[base + i];
                let (aw, bw) = (a as usize * w, b as usize * w);
                for l in 0..w {
                    let g = gbuf[l];
                    if g != zero {
                        adj[aw + l] += g * inv;
                        adj[bw + l] -= g * rv * inv;
                    }
                }
                touched.push(a);
                touched.push(b);
            }
            Instr::Neg(a) => {
                let aw = a as usize * w;
                for l in 0..w {
                    let g = gbuf[l];
                    if g != zero {
                        adj[aw + l] -= g;
                    }
                }
                touched.push(a);
            }
            Instr::Exp(a) => {
                let f = vals[base + i];
                let aw = a as usize * w;
                for l in 0..w {
                    let g = gbuf[l];
                    if g != zero {
                        adj[aw + l] += g * f;
                    }
                }
                touched.push(a);
            }
            Instr::Ln(a) => {
                let f = T::one() / vals[a as usize];
                let aw = a as usize * w;
                for l in 0..w {
                    let g = gbuf[l];
                    if g != zero {
                        adj[aw + l] += g * f;
                    }
                }
                touched.push(a);
            }
            Instr::Sin(a) => {
                let f = vals[a as usize].cos();
                let aw = a as usize * w;
                for l in 0..w {
                    let g = gbuf[l];
                    if g != zero {
                        adj[aw + l] += g * f;
                    }
                }
                touched.push(a);
            }
            Instr::Cos(a) => {
                let f = -vals[a as usize].sin();
                let aw = a as usize * w;
                for l in 0..w {
                    let g = gbuf[l];
                    if g != zero {
                        adj[aw + l] += g * f;
                    }
                }
                touched.push(a);
            }
            Instr::Pow(a, e) => {
                let f = e * vals[a as usize].powf(e - T::one());
                let aw = a as usize * w;
                for l in 0..w {
                    let g = gbuf[l];
                    if g != zero {
                        adj[aw + l] += g * f;
                    }
                }
                touched.push(a);
            }
        }
    }

    // Gather the input adjoints and restore the all-zero adjoint state. The
    // touched list covers every slot a sweep can have written; input slots
    // are cleared unconditionally because seeds may alias them.
    for j in 0..tape.n_state {
        for l in 0..w {
            x_out[l * tape.n_state + j] = adj[j * w + l];
        }
    }
    let pbase = tape.n_state;
    for k in 0..tape.n_param {
        for l in 0..w {
            a_out[l * tape.n_param + k] = adj[(pbase + k) * w + l];
        }
    }
    for s in 0..tape.n_state + tape.n_param + 1 {
        for l in 0..w {
            adj[s * w + l] = zero;
        }
    }
    for s in touched.drain(..) {
        let row = s as usize * w;
        for l in 0..w {
            adj[row + l] = zero;
        }
    }
    Ok(())
}

/// Dense Jacobians `(dF/du, dF/dalpha)` at `(u, alpha, t)`, assembled from
/// identity-seeded reverse sweeps in batches of the workspace lane width.
///
/// Row `i` equals the result of [`reverse_vjp`] with the `i`-th unit seed, so
/// the assembled matrix is bitwise consistent with matrix-free sweeps.
pub fn jacobian_dense<T: Real>(
    tape: &Tape<T>,
    ws: &mut ReplayWorkspace<T>,
    u: &[T],
    alpha: &[T],
    t: T,
) -> Result<(Array2<T>, Array2<T>)> {
    let mut out = vec![T::zero(); tape.n_out()];
    forward_eval_into(tape, ws, u, alpha, t, &mut out)?;

    let (m, n, p, w) = (tape.n_out(), tape.n_state, tape.n_param, ws.lanes);
    let mut jx = Array2::zeros((m, n));
    let mut ja = Array2::zeros((m, p));
    let mut seeds = LaneBatch::new(w, m)?;
    let mut x_buf = vec![T::zero(); w * n];
    let mut a_buf = vec![T::zero(); w * p];
    let mut unit = vec![T::zero(); m];

    let mut row = 0;
    while row < m {
        let lanes_here = w.min(m - row);
        seeds.zero();
        for l in 0..lanes_here {
            unit[row + l] = T::one();
            seeds.set_lane(l, &unit)?;
            unit[row + l] = T::zero();
        }
        reverse_vjp_into(tape, ws, &seeds, &mut x_buf, &mut a_buf)?;
        for l in 0..lanes_here {
            for j in 0..n {
                jx[(row + l, j)] = x_buf[l * n + j];
            }
            for k in 0..p {
                ja[(row + l, k)] = a_buf[l * p + k];
            }
        }
        row += lanes_here;
    }
    Ok((jx, ja))
}

#[cfg(test)]
mod tests {
    use super::*;

    /// F(u, a, t) = (a0 * u0 * u1 + sin(t), u0 / u1 + exp(a1 * u0))
    fn sample_tape() -> Tape<f64> {
        record(2, 2, |rec| {
            let u0 = rec.state(0);
            let u1 = rec.state(1);
            let a0 = rec.param(0);
            let a1 = rec.param(1);
            let t = rec.time();
            let f0 = a0 * u0 * u1 + t.sin();
            let f1 = u0 / u1 + (a1 * u0).exp();
            Ok(vec![f0, f1])
        })
        .unwrap()
    }

    #[test]
    fn forward_eval_matches_hand_computation() {
        let tape = sample_tape();
        let mut ws = ReplayWorkspace::new(&tape, 1).unwrap();
        let u = [2.0, 3.0];
        let alpha = [0.5, 0.25];
        let t = 0.7;
        let out = forward_eval(&tape, &mut ws, &u, &alpha, t).unwrap();
        assert_eq!(out[0], 0.5 * 2.0 * 3.0 + 0.7f64.sin());
        assert_eq!(out[1], 2.0 / 3.0 + (0.25f64 * 2.0).exp());
    }

    #[test]
    fn repeated_replay_is_bitwise_identical() {
        let tape = sample_tape();
        let mut ws = ReplayWorkspace::new(&tape, 2).unwrap();
        let u = [1.7, -0.3];
        let alpha = [0.9, 1.1];
        let first = forward_eval(&tape, &mut ws, &u, &alpha, 2.3).unwrap();
        let mut seeds = LaneBatch::new(2, 2).unwrap();
        seeds.set_lane(0, &[1.0, 0.0]).unwrap();
        seeds.set_lane(1, &[0.25, -2.0]).unwrap();
        let (sx1, sa1) = reverse_vjp(&tape, &mut ws, &seeds).unwrap();
        let second = forward_eval(&tape, &mut ws, &u, &alpha, 2.3).unwrap();
        let (sx2, sa2) = reverse_vjp(&tape, &mut ws, &seeds).unwrap();
        assert_eq!(first, second);
        assert_eq!(sx1, sx2);
        assert_eq!(sa1, sa2);
    }

    #[test]
    fn reverse_vjp_matches_analytic_jacobian() {
        let tape = sample_tape();
        let mut ws = ReplayWorkspace::new(&tape, 1).unwrap();
        let (u0, u1, a0, a1, t) = (2.0f64, 3.0f64, 0.5f64, 0.25f64, 0.7f64);
        forward_eval(&tape, &mut ws, &[u0, u1], &[a0, a1], t).unwrap();
        let mut seeds = LaneBatch::new(1, 2).unwrap();
        seeds.set_lane(0, &[1.0, 0.0]).unwrap();
        let (sx, sa) = reverse_vjp(&tape, &mut ws, &seeds).unwrap();
        assert!((sx[0] - a0 * u1).abs() < 1e-15);
        assert!((sx[1] - a0 * u0).abs() < 1e-15);
        assert!((sa[0] - u0 * u1).abs() < 1e-15);
        assert_eq!(sa[1], 0.0);

        seeds.set_lane(0, &[0.0, 1.0]).unwrap();
        let (sx, sa) = reverse_vjp(&tape, &mut ws, &seeds).unwrap();
        let e = (a1 * u0).exp();
        assert!((sx[0] - (1.0 / u1 + a1 * e)).abs() < 1e-15);
        assert!((sx[1] - (-u0 / (u1 * u1))).abs() < 1e-15);
        assert_eq!(sa[0], 0.0);
        assert!((sa[1] - u0 * e).abs() < 1e-14);
    }

    #[test]
    fn adjoint_buffer_is_clean_after_each_sweep() {
        let tape = sample_tape();
        let mut ws = ReplayWorkspace::new(&tape, 3).unwrap();
        forward_eval(&tape, &mut ws, &[1.0, 2.0], &[3.0, 4.0], 0.1).unwrap();
        let mut seeds = LaneBatch::new(3, 2).unwrap();
        seeds.set_lane(0, &[1.0, 1.0]).unwrap();
        seeds.set_lane(2, &[-1.0, 0.5]).unwrap();
        reverse_vjp(&tape, &mut ws, &seeds).unwrap();
        assert!(ws.adjoints.iter().all(|&x| x == 0.0));
        assert!(ws.touched.is_empty());
    }

    #[test]
    fn constant_folding_collapses_constant_subtrees() {
        let tape: Tape<f64> = record(1, 0, |rec| {
            let c = rec.constant(2.0) * rec.constant(3.0) + rec.constant(1.0);
            Ok(vec![rec.state(0) * c])
        })
        .unwrap();
        // Three constants, two folded results, one multiply by the state.
        // Folding keeps the op count independent of the constant tree shape.
        let mul_like = tape
            .instrs
            .iter()
            .filter(|i| matches!(i, Instr::Mul(_, _) | Instr::Add(_, _)))
            .count();
        assert_eq!(mul_like, 1);
        let mut ws = ReplayWorkspace::new(&tape, 1).unwrap();
        let out = forward_eval(&tape, &mut ws, &[2.0], &[], 0.0).unwrap();
        assert_eq!(out[0], 14.0);
    }

    #[test]
    fn branching_on_runtime_values_is_a_recording_error() {
        let err = record::<f64, _>(1, 0, |rec| {
            let u = rec.state(0);
            let half = rec.constant(0.5);
            // A data-dependent branch needs an ordering; requesting one fails.
            let _ord = u.compare(half)?;
            Ok(vec![u])
        })
        .unwrap_err();
        assert!(matches!(err, Error::Recording(_)));
    }

    #[test]
    fn outputs_may_alias_input_slots() {
        // F = (u1, u0): a pure shuffle with no instructions.
        let tape: Tape<f64> = record(2, 0, |rec| Ok(vec![rec.state(1), rec.state(0)])).unwrap();
        assert!(tape.is_empty());
        let mut ws = ReplayWorkspace::new(&tape, 1).unwrap();
        let out = forward_eval(&tape, &mut ws, &[5.0, 7.0], &[], 0.0).unwrap();
        assert_eq!(out, vec![7.0, 5.0]);
        let mut seeds = LaneBatch::new(1, 2).unwrap();
        seeds.set_lane(0, &[1.0, 2.0]).unwrap();
        let (sx, _) = reverse_vjp(&tape, &mut ws, &seeds).unwrap();
        assert_eq!(sx, vec![2.0, 1.0]);
    }

    #[test]
    fn reverse_before_forward_is_rejected() {
        let tape = sample_tape();
        let mut ws = ReplayWorkspace::new(&tape, 1).unwrap();
        let seeds = LaneBatch::new(1, 2).unwrap();
        let err = reverse_vjp(&tape, &mut ws, &seeds).unwrap_err();
        assert_eq!(err, Error::WorkspaceNotPrimed);
    }

    #[test]
    fn dimension_mismatches_are_rejected() {
        let tape = sample_tape();
        let mut ws = ReplayWorkspace::new(&tape, 1).unwrap();
        assert!(forward_eval(&tape, &mut ws, &[1.0], &[1.0, 1.0], 0.0).is_err());
        assert!(forward_eval(&tape, &mut ws, &[1.0, 2.0], &[1.0], 0.0).is_err());
        forward_eval(&tape, &mut ws, &[1.0, 2.0], &[1.0, 1.0], 0.0).unwrap();
        let seeds = LaneBatch::new(1, 3).unwrap();
        assert!(reverse_vjp(&tape, &mut ws, &seeds).is_err());
    }

    #[test]
    fn jacobian_rows_equal_unit_seed_sweeps_bitwise() {
        let tape = sample_tape();
        let u = [1.3, 0.8];
        let alpha = [0.4, 0.6];
        let t = 1.9;
        let mut ws = ReplayWorkspace::new(&tape, 2).unwrap();
        let (jx, ja) = jacobian_dense(&tape, &mut ws, &u, &alpha, t).unwrap();

        let mut ws1 = ReplayWorkspace::new(&tape, 1).unwrap();
        forward_eval(&tape, &mut ws1, &u, &alpha, t).unwrap();
        for i in 0..2 {
            let mut seeds = LaneBatch::new(1, 2).unwrap();
            let mut unit = [0.0, 0.0];
            unit[i] = 1.0;
            seeds.set_lane(0, &unit).unwrap();
            let (sx, sa) = reverse_vjp(&tape, &mut ws1, &seeds).unwrap();
            for j in 0..2 {
                assert_eq!(jx[(i, j)], sx[j]);
                assert_eq!(ja[(i, j)], sa[j]);
            }
        }
    }

    #[test]
    fn lane_results_do_not_depend_on_batch_companions() {
        let tape = sample_tape();
        let u = [0.9, 1.4];
        let alpha = [1.2, -0.7];
        let t = 0.33;
        let lam = [0.6, -1.9];

        let mut ws1 = ReplayWorkspace::new(&tape, 1).unwrap();
        forward_eval(&tape, &mut ws1, &u, &alpha, t).unwrap();
        let mut single = LaneBatch::new(1, 2).unwrap();
        single.set_lane(0, &lam).unwrap();
        let (sx, sa) = reverse_vjp(&tape, &mut ws1, &single).unwrap();

        let mut ws4 = ReplayWorkspace::new(&tape, 4).unwrap();
        forward_eval(&tape, &mut ws4, &u, &alpha, t).unwrap();
        let mut batch = LaneBatch::new(4, 2).unwrap();
        batch.set_lane(0, &[2.0, 3.0]).unwrap();
        batch.set_lane(2, &lam).unwrap();
        batch.set_lane(3, &[-1.0, -1.0]).unwrap();
        let (bx, ba) = reverse_vjp(&tape, &mut ws4, &batch).unwrap();

        assert_eq!(&bx[2 * 2..3 * 2], &sx[..]);
        assert_eq!(&ba[2 * 2..3 * 2], &sa[..]);
    }

    #[test]
    fn single_precision_replay_works() {
        let tape: Tape<f32> = record(1, 1, |rec| {
            Ok(vec![rec.param(0) * rec.state(0)])
        })
        .unwrap();
        let mut ws = ReplayWorkspace::new(&tape, 1).unwrap();
        let out = forward_eval(&tape, &mut ws, &[2.0f32], &[0.5f32], 0.0).unwrap();
        assert_eq!(out[0], 1.0f32);
    }
}
