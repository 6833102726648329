//! Bundled example programs: the small pipeline, sequence alignment, blocked
//! matrix multiply, convolution + ReLU, sparse matrix-vector multiply, and
//! the merge-sort tree, each with default bindings and input generators.

use rand::Rng;

use crate::ir::Program;
use crate::parse::{parse_spec, ParseError};
use crate::schedule::Schedule;
use crate::value::{Binding, ElemType, Scalar, Tensor};

pub const FIG4: &str = r#"# Smallest pipeline: load, compute, store.
param B float 1
param I
var i
func A
func B_provider
func A_consumer
A(i) = negate(B(i))
bounds A i 0 I
A.isolate_producer_chain(B, B_provider).isolate_consumer_chain(A, A_consumer)
"#;

pub const SGEMM: &str = r#"# Blocked matrix multiply on a 2-D compute array with loaders and feeders.
param A float 2
param B float 2
param I
param J
param K
assume no_alias(A, B)
var i j k
func C
C(i, j) = 0
C(i, j) += A(i, k) * B(k, j)
bounds C i 0 I
bounds C j 0 J
bounds C k 0 K
var ii jj kk iii jjj kkk
assume symbolic_constant(II, JJ, KK, III, JJJ, KKK)
assume divisible(I, II)
assume divisible(II, III)
assume divisible(J, JJ)
assume divisible(JJ, JJJ)
assume divisible(K, KK)
assume divisible(KK, KKK)
C.tile(i, j, k, ii, jj, kk, iii, jjj, kkk, II, JJ, KK, III, JJJ, KKK)
func A_loader
func A_feeder
func B_loader
func B_feeder
func C_collector
func C_unloader
func A_serializer host
func B_serializer host
func C_deserializer host
C.isolate_producer_chain(A, A_serializer, A_loader, A_feeder).isolate_producer_chain(B, B_serializer, B_loader, B_feeder).isolate_consumer_chain(C, C_deserializer, C_unloader, C_collector)
C.unroll(ii, jj).relay(A, <0, 1>).relay(B, <1, 0>).relay(C, <-1, 0>)
A_serializer.remove(jjj, jj, j)
A_loader.remove(jjj, jj).vectorize(kkk)
A_feeder.unroll(ii).relay(A, <1>).buffer(A, ii, DOUBLE)
B_serializer.remove(iii, ii, i)
B_loader.remove(iii, ii).vectorize(kkk)
B_feeder.unroll(jj).relay(B, <1>).buffer(B, jj, DOUBLE)
C_collector.remove(k, kk, kkk).reorder(jj, jjj, iii).unroll(jj).relay(C, <-1>)
C_unloader.remove(k, kk, kkk).reorder(jj, jjj, iii)
C_deserializer.remove(k, kk, kkk).reorder(jj, jjj, iii)
"#;

pub const SMITH_WATERMAN: &str = r#"# Sequence alignment: a tiled stencil driven by one feeder/collector node.
param T int 1
param S int 1
param I
param J
var i j
func A
A(-1, -1) = 0
A(i, -1) = 0
A(-1, j) = 0
A(i, j) = f(A(i - 1, j), A(i, j - 1), A(i - 1, j - 1), T(i - 1), S(j - 1))
bounds A i 0 I
bounds A j 0 J
store A I-1 J-1
assume symbolic_constant(II, JJ, MAX_J)
assume divisible(I, II)
assume divisible(J, JJ)
assume J <= MAX_J
var ii jj
A.tile(i, j, ii, jj, II, JJ)
func driver
A.isolate_producer_chain(S, driver).isolate_producer_chain(T, driver).isolate_producer_chain(A, driver).isolate_consumer_chain(A, driver)
A.unroll(ii, jj).relay(A, <1, 0>).relay(A, <0, 1>).relay(A, <1, 1>).relay(T, <1, 0>).relay(S, <0, 1>).buffer(A, j, REGISTER)
"#;

pub const CONV_RELU: &str = r#"# Convolution feeding ReLU: 3-D and 2-D arrays with a two-level input cache.
param input int 3
param weight int 4
param bias int 1
param Nof
param Noy
param Nox
param Nif
param Nky
param Nkx
assume symbolic_constant(S)
var no y x ni ky kx
func convolution
func ReLU
convolution(no, y, x) = 0
convolution(no, y, x) += input(ni, y * S + ky, x * S + kx) * weight(no, ni, ky, kx)
ReLU(no, y, x) = max(convolution(no, y, x) + bias(no), 0)
bounds convolution no 0 Nof
bounds convolution y 0 Noy
bounds convolution x 0 Nox
bounds convolution ni 0 Nif
bounds convolution ky 0 Nky
bounds convolution kx 0 Nkx
bounds ReLU no 0 Nof
bounds ReLU y 0 Noy
bounds ReLU x 0 Nox
assume symbolic_constant(Tof, Toy, Pof, Poy, Pox)
assume divisible(Nof, Tof)
assume divisible(Tof, Pof)
assume divisible(Noy, Toy)
assume divisible(Toy, Poy)
assume divisible(Nox, Pox)
var noo yy xx nooo yyy
convolution.tile(no, y, noo, yy, nooo, yyy, Tof, Toy, Pof, Poy).tile(x, xx, Pox).reorder(xx, nooo, yyy, yy, x, noo, y, no)
ReLU.tile(no, y, noo, yy, nooo, yyy, Tof, Toy, Pof, Poy).tile(x, xx, Pox).reorder(xx, nooo, yyy, yy, x, noo, y, no)
func input_loader
func input_feeder
func weight_loader
func weight_feeder
func bias_feeder
ReLU.isolate_producer_chain(bias, bias_feeder)
convolution.isolate_producer_chain(input, input_loader, input_feeder).isolate_producer_chain(weight, weight_loader, weight_feeder)
ReLU.unroll(xx, nooo).relay(bias, <1, 0>).buffer(ReLU, y)
convolution.unroll(xx, nooo, yyy).relay(input, <0, 1, 0>).relay(weight, <1, 0, 0>)
input_loader.remove(noo, nooo)
input_feeder.buffer(input, y).linebuffer(input, yy)
weight_loader.remove(y, x, yy, xx, yyy)
weight_feeder.buffer(weight, no)
"#;

pub const SPMV: &str = r#"# Sparse matrix-vector multiply over slot-scheduled rows.
param Ap float 2
param column_ids int 2
param row_lengths int 2
param x float 1
param C
param NUM_ROWS
assume symbolic_constant(NUM_SLOTS, NUM_ACCS)
assume divisible(NUM_SLOTS, NUM_ACCS)
var c r
func product
func y
func decoder
func matrix_fetcher
product(c, r) = Ap(c, r) * x(column_ids(c, r))
y(decoder(row_lengths, r)) += product(c, r)
bounds product c 0 C
bounds product r 0 NUM_SLOTS
bounds y c 0 C
bounds y r 0 NUM_SLOTS
product.isolate_producer_chain(Ap, matrix_fetcher)
product.isolate_producer_chain(column_ids, matrix_fetcher)
decoder.isolate_producer_chain(row_lengths, matrix_fetcher)
var rr
y.tile(r, rr, NUM_ACCS).unroll(rr).buffer(y)
product.unroll(r).buffer(x)
decoder.define_extern("decoder_impl", void, {channel int in_row_lengths[], channel int out_row_ids[]})
matrix_fetcher.define_extern("matrix_fetcher_impl", void, {float in_A[], int in_column_ids[], int in_row_lengths[], channel float out_A[], channel int out_column_ids[], channel int out_row_lengths[]})
"#;

pub const MERGESORT: &str = r#"# Tree of merge nodes: sorted input streams reduce to one sorted stream.
param input int 2
assume symbolic_constant(L, S)
var l m
func out
func input_loader
out(l, m) = merge(S, input(2 * m), input(2 * m + 1)) when l == 0
out(l, m) = merge(pow2(l) * S, out(l - 1, 2 * m), out(l - 1, 2 * m + 1)) when 0 < l
bounds out l 0 L
bounds out m 0 pow2(L - 1 - l)
store out L-1 0
out.isolate_producer_chain(input, input_loader)
out.unroll(l, m).relay(out, <1, m / 2 - m>)
out.define_extern("merge_impl", void, {int size, channel int input1, channel int input2, channel int output})
"#;

pub const NAMES: [&str; 6] = [
    "fig4",
    "sgemm",
    "smith-waterman",
    "conv-relu",
    "spmv",
    "mergesort",
];

pub fn spec_text(name: &str) -> Option<&'static str> {
    match name {
        "fig4" => Some(FIG4),
        "sgemm" => Some(SGEMM),
        "smith-waterman" => Some(SMITH_WATERMAN),
        "conv-relu" => Some(CONV_RELU),
        "spmv" => Some(SPMV),
        "mergesort" => Some(MERGESORT),
        _ => None,
    }
}

pub fn load(name: &str) -> Result<(Program, Schedule), ParseError> {
    let text = spec_text(name).ok_or_else(|| ParseError {
        line: 0,
        col: 0,
        message: format!("unknown example `{name}`"),
    })?;
    parse_spec(text)
}

/// Default binding (scalars) plus freshly generated inputs for an example.
pub fn default_binding(name: &str, rng: &mut impl Rng) -> Option<Binding> {
    let mut b = Binding::new();
    match name {
        "fig4" => {
            let i = 64;
            b.set_scalar("I", i);
            let data: Vec<f64> = (0..i).map(|_| rng.gen_range(-10.0..10.0)).collect();
            b.set_tensor("B", Tensor::from_vec_f64(&data));
        }
        "sgemm" => {
            let (i, j, k) = (8, 8, 8);
            b.set_scalar("I", i).set_scalar("J", j).set_scalar("K", k);
            b.set_scalar("II", 4)
                .set_scalar("JJ", 4)
                .set_scalar("KK", 4);
            b.set_scalar("III", 2)
                .set_scalar("JJJ", 2)
                .set_scalar("KKK", 2);
            b.set_tensor("A", random_int_matrix_f(i as usize, k as usize, rng));
            b.set_tensor("B", random_int_matrix_f(k as usize, j as usize, rng));
        }
        "smith-waterman" => {
            let (i, j) = (8, 8);
            b.set_scalar("I", i).set_scalar("J", j);
            b.set_scalar("II", 4)
                .set_scalar("JJ", 4)
                .set_scalar("MAX_J", 16);
            b.set_tensor("T", random_symbol_seq(i as usize, rng));
            b.set_tensor("S", random_symbol_seq(j as usize, rng));
        }
        "conv-relu" => {
            b.set_scalar("Nof", 4)
                .set_scalar("Noy", 4)
                .set_scalar("Nox", 4)
                .set_scalar("Nif", 2)
                .set_scalar("Nky", 3)
                .set_scalar("Nkx", 3)
                .set_scalar("S", 1);
            b.set_scalar("Tof", 2)
                .set_scalar("Toy", 2)
                .set_scalar("Pof", 2)
                .set_scalar("Poy", 2)
                .set_scalar("Pox", 2);
            // input rows/cols must cover y*S + ky up to (Noy-1)*S + Nky - 1.
            let rows = (4 - 1) + 3;
            b.set_tensor("input", random_int_tensor(&[2, rows, rows], rng));
            b.set_tensor("weight", random_int_tensor(&[4, 2, 3, 3], rng));
            b.set_tensor("bias", random_int_tensor(&[4], rng));
        }
        "spmv" => {
            let rows = rng.gen_range(8..=32usize);
            let cols = rng.gen_range(8..=32usize);
            let dense = random_sparse_dense(rows, cols, 0.2, rng);
            let x: Vec<f64> = (0..cols).map(|_| rng.gen_range(-4..=4) as f64).collect();
            let pre = preprocess_sparse(&dense, 4);
            b.set_scalar("NUM_SLOTS", 4).set_scalar("NUM_ACCS", 2);
            b.set_scalar("C", pre.padded_cols as i64);
            b.set_scalar("NUM_ROWS", rows as i64);
            b.set_tensor("Ap", pre.values);
            b.set_tensor("column_ids", pre.column_ids);
            b.set_tensor("row_lengths", pre.row_lengths);
            b.set_tensor("x", Tensor::from_vec_f64(&x));
        }
        "mergesort" => {
            let (l, s) = (3i64, 4i64);
            b.set_scalar("L", l).set_scalar("S", s);
            let streams = 1usize << (l - 1) as usize; // nodes at level 0
            let mut data = Vec::new();
            for _ in 0..streams * 2 {
                let mut row: Vec<i64> = (0..s).map(|_| rng.gen_range(-50..50)).collect();
                row.sort_unstable();
                data.push(row);
            }
            let t = Tensor {
                elem: ElemType::Int,
                origin: vec![0, 0],
                shape: vec![streams * 2, s as usize],
                data: data.into_iter().flatten().map(Scalar::Int).collect(),
            };
            b.set_tensor("input", t);
        }
        _ => return None,
    }
    Some(b)
}

pub fn random_int_matrix_f(r: usize, c: usize, rng: &mut impl Rng) -> Tensor {
    let data: Vec<Scalar> = (0..r * c)
        .map(|_| Scalar::Float(rng.gen_range(-5..=5) as f64))
        .collect();
    Tensor {
        elem: ElemType::Float,
        origin: vec![0, 0],
        shape: vec![r, c],
        data,
    }
}

pub fn random_int_tensor(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor {
        elem: ElemType::Int,
        origin: vec![0; shape.len()],
        shape: shape.to_vec(),
        data: (0..n).map(|_| Scalar::Int(rng.gen_range(-4..=4))).collect(),
    }
}

/// Bio-sequence inputs indexed from -1: position -1 pads the boundary reads.
pub fn random_symbol_seq(n: usize, rng: &mut impl Rng) -> Tensor {
    let mut data = vec![Scalar::Int(0)];
    data.extend((0..n).map(|_| Scalar::Int(rng.gen_range(0..4))));
    Tensor {
        elem: ElemType::Int,
        origin: vec![-1],
        shape: vec![n + 1],
        data,
    }
}

pub fn random_sparse_dense(
    rows: usize,
    cols: usize,
    density: f64,
    rng: &mut impl Rng,
) -> Vec<Vec<f64>> {
    (0..rows)
        .map(|_| {
            (0..cols)
                .map(|_| {
                    if rng.gen_bool(density) {
                        rng.gen_range(-4..=4) as f64
                    } else {
                        0.0
                    }
                })
                .collect()
        })
        .collect()
}

/// Host-side preprocessing of a sparse matrix into slot-major streams.
pub struct Preprocessed {
    /// Slot-major values, shape (C, NUM_SLOTS).
    pub values: Tensor,
    /// Original column index per slot entry, shape (C, NUM_SLOTS).
    pub column_ids: Tensor,
    /// Per-slot row lengths, shape (ceil(rows/NUM_SLOTS), NUM_SLOTS).
    pub row_lengths: Tensor,
    pub padded_cols: usize,
}

/// Greedy row scheduling: each original row is appended to the currently
/// shortest slot stream, which matches the order the decoder assigns fresh
/// row ids. Slots are steered with zero-padding so every slot carries exactly
/// ceil(rows / slots) rows, and all streams are padded to a common length.
pub fn preprocess_sparse(dense: &[Vec<f64>], slots: usize) -> Preprocessed {
    let rows = dense.len();
    assert!(rows >= slots, "need at least one row per slot");
    let target_rows_per_slot = rows.div_ceil(slots);
    struct SlotState {
        entries: Vec<(f64, i64)>,
        lengths: Vec<i64>,
    }
    let mut state: Vec<SlotState> = (0..slots)
        .map(|_| SlotState {
            entries: Vec::new(),
            lengths: Vec::new(),
        })
        .collect();
    for row in dense {
        // Empty rows still occupy one slot entry so the decoder sees them.
        let mut entries: Vec<(f64, i64)> = row
            .iter()
            .enumerate()
            .filter(|(_, &v)| v != 0.0)
            .map(|(c, &v)| (v, c as i64))
            .collect();
        if entries.is_empty() {
            entries.push((0.0, 0));
        }
        // The decoder starts a new row wherever a slot runs dry first; steer
        // full slots out of the way by lengthening their last row with zeros.
        loop {
            let (best, _) = state
                .iter()
                .enumerate()
                .min_by_key(|(i, s)| (s.entries.len(), *i))
                .unwrap();
            if state[best].lengths.len() < target_rows_per_slot {
                state[best].lengths.push(entries.len() as i64);
                state[best].entries.extend(entries);
                break;
            }
            *state[best].lengths.last_mut().unwrap() += 1;
            state[best].entries.push((0.0, 0));
        }
    }
    // Balance row counts: slots short on rows get zero rows, placed so their
    // start positions come after every real row's start.
    let max_len = state.iter().map(|s| s.entries.len()).max().unwrap();
    for s in state.iter_mut() {
        while s.lengths.len() < target_rows_per_slot {
            // Pad current stream to the running maximum first so the fresh
            // row id is assigned after all real ids.
            while s.entries.len() < max_len {
                *s.lengths.last_mut().unwrap() += 1;
                s.entries.push((0.0, 0));
            }
            s.lengths.push(1);
            s.entries.push((0.0, 0));
        }
    }
    let padded = state.iter().map(|s| s.entries.len()).max().unwrap();
    for s in state.iter_mut() {
        let deficit = padded - s.entries.len();
        if deficit > 0 {
            *s.lengths.last_mut().unwrap() += deficit as i64;
            s.entries.extend(std::iter::repeat_n((0.0, 0), deficit));
        }
    }
    let mut values = Tensor::zeros(ElemType::Float, vec![0, 0], vec![padded, slots]);
    let mut col_ids = Tensor::zeros(ElemType::Int, vec![0, 0], vec![padded, slots]);
    for (r, s) in state.iter().enumerate() {
        for (c, (v, col)) in s.entries.iter().enumerate() {
            values.set(&[c as i64, r as i64], Scalar::Float(*v));
            col_ids.set(&[c as i64, r as i64], Scalar::Int(*col));
        }
    }
    let mut row_lengths =
        Tensor::zeros(ElemType::Int, vec![0, 0], vec![target_rows_per_slot, slots]);
    for (r, s) in state.iter().enumerate() {
        for (i, len) in s.lengths.iter().enumerate() {
            row_lengths.set(&[i as i64, r as i64], Scalar::Int(*len));
        }
    }
    Preprocessed {
        values,
        column_ids: col_ids,
        row_lengths,
        padded_cols: padded,
    }
}

/// Dense reference for sparse matrix-vector multiply.
pub fn dense_matvec(dense: &[Vec<f64>], x: &[f64]) -> Vec<f64> {
    dense
        .iter()
        .map(|row| row.iter().zip(x).map(|(a, b)| a * b).sum())
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn all_examples_parse_cleanly() {
        for name in NAMES {
            let (p, s) = load(name).unwrap_or_else(|e| panic!("{name}: {e}"));
            assert!(!p.funcs.is_empty(), "{name}");
            let diags = crate::schedule::static_legality_check(&p, &s);
            assert!(diags.is_empty(), "{name}: {diags:?}");
        }
    }

    #[test]
    fn sgemm_transliteration_line_count_is_close_to_paper() {
        let lines = SGEMM
            .lines()
            .filter(|l| !l.trim().is_empty() && !l.trim_start().starts_with('#'))
            .count();
        assert!(lines < 45, "got {lines}");
    }

    #[test]
    fn preprocessor_streams_consistent_with_decoder_walk() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        for _ in 0..20 {
            let rows = rng.gen_range(4..=24usize);
            let cols = rng.gen_range(4..=24usize);
            let dense = random_sparse_dense(rows, cols, 0.25, &mut rng);
            let slots = 4;
            let pre = preprocess_sparse(&dense, slots);
            // Walk (c, r) the way the device does; decode row ids and
            // accumulate to verify ids recover the original rows.
            let mut counters = vec![0i64; slots];
            let mut cursor = vec![0i64; slots];
            let mut ids = vec![0i64; slots];
            let mut next_id = 0i64;
            let x: Vec<f64> = (0..cols).map(|i| (i as f64) + 1.0).collect();
            let mut y = vec![0.0f64; rows + slots * pre.padded_cols];
            for c in 0..pre.padded_cols as i64 {
                for r in 0..slots as i64 {
                    if counters[r as usize] == 0 {
                        let len = pre
                            .row_lengths
                            .get(&[cursor[r as usize], r])
                            .unwrap()
                            .as_index()
                            .unwrap();
                        assert!(len > 0, "non-positive scheduled row length");
                        cursor[r as usize] += 1;
                        counters[r as usize] = len;
                        ids[r as usize] = next_id;
                        next_id += 1;
                    }
                    counters[r as usize] -= 1;
                    let v = pre.values.get(&[c, r]).unwrap().as_f64();
                    let col = pre.column_ids.get(&[c, r]).unwrap().as_index().unwrap();
                    y[ids[r as usize] as usize] += v * x[col as usize];
                }
            }
            // Real rows take the first ids in original order; synthetic
            // balancing rows may follow.
            assert!(next_id as usize >= rows);
            let want = dense_matvec(&dense, &x);
            for (i, w) in want.iter().enumerate() {
                assert!((y[i] - w).abs() < 1e-9, "row {i}: {} vs {w}", y[i]);
            }
            for v in y.iter().skip(rows) {
                assert_eq!(*v, 0.0, "synthetic rows must contribute nothing");
            }
        }
    }
}
