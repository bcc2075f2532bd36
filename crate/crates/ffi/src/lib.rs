//! C interface. Handles are opaque and owned by the caller once returned;
//! release them with the matching `_free`. Strings handed out by this library
//! are released with `recap_string_free`. Every pointer argument must be
//! either NULL (reported as `RECAP_STATUS_NULL_POINTER` unless documented as
//! optional) or valid for the duration of the call. On failure the message is
//! available from `recap_last_error` on the same thread.
#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use recap::config::Config;
use recap::corpus::image::PixelGrid;
use recap::corpus::load_corpus;
use recap::evaluator::{bleu, metric_tokens, rouge_l, tem};
use recap::graph::{compute_pmi, ProgressionGraph};
use recap::trainer::{build_graph, Stage2Bundle};
use recap::RecapError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RecapStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Io = 3,
    Parse = 4,
    Validation = 5,
    Shape = 6,
    Precondition = 7,
    Checkpoint = 8,
    Config = 9,
    Json = 10,
    Panic = 11,
}

pub struct RecapGraph {
    inner: ProgressionGraph,
}

pub struct RecapModel {
    bundle: Stage2Bundle,
    graph: ProgressionGraph,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

enum Failure {
    Null(&'static str),
    Utf8(&'static str),
    Core(RecapError),
}

impl From<RecapError> for Failure {
    fn from(e: RecapError) -> Self {
        Failure::Core(e)
    }
}

fn set_error(msg: String) {
    let msg = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &RecapError) -> RecapStatus {
    match e {
        RecapError::Io { .. } => RecapStatus::Io,
        RecapError::Parse { .. } => RecapStatus::Parse,
        RecapError::Validation(_) => RecapStatus::Validation,
        RecapError::Shape(_) => RecapStatus::Shape,
        RecapError::Precondition(_) => RecapStatus::Precondition,
        RecapError::Checkpoint(_) => RecapStatus::Checkpoint,
        RecapError::Config(_) => RecapStatus::Config,
        RecapError::Json(_) => RecapStatus::Json,
    }
}

/// Runs `f`, turning errors and panics into a status plus a stored message.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> RecapStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => RecapStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("{what} is NULL"));
            RecapStatus::NullPointer
        }
        Ok(Err(Failure::Utf8(what))) => {
            set_error(format!("{what} is not valid UTF-8"));
            RecapStatus::InvalidUtf8
        }
        Ok(Err(Failure::Core(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            RecapStatus::Panic
        }
    }
}

unsafe fn text<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Failure::Utf8(what))
}

unsafe fn texts(p: *const *const c_char, n: usize, what: &'static str) -> Result<Vec<String>, Failure> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    std::slice::from_raw_parts(p, n)
        .iter()
        .map(|&s| text(s, what).map(str::to_string))
        .collect()
}

unsafe fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or(Failure::Null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

fn owned_string(s: String) -> Result<*mut c_char, Failure> {
    CString::new(s)
        .map(CString::into_raw)
        .map_err(|_| Failure::Core(RecapError::Validation("string contains NUL".into())))
}

unsafe fn grid(pixels: *const u8, height: usize, width: usize, what: &'static str) -> Result<PixelGrid, Failure> {
    if pixels.is_null() {
        return Err(Failure::Null(what));
    }
    let n = height.checked_mul(width).ok_or(RecapError::Shape("image size overflows".into()))?;
    Ok(PixelGrid::new(height, width, std::slice::from_raw_parts(pixels, n).to_vec())?)
}

/// Library version, statically allocated.
#[no_mangle]
pub extern "C" fn recap_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failed call on this thread, or NULL. Valid until the
/// next call into the library on this thread.
#[no_mangle]
pub extern "C" fn recap_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

#[no_mangle]
pub unsafe extern "C" fn recap_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// Pointwise mutual information from document counts.
#[no_mangle]
pub unsafe extern "C" fn recap_compute_pmi(
    count_xy: u64,
    count_x: u64,
    count_y: u64,
    n_docs: u64,
    out_pmi: *mut f64,
) -> RecapStatus {
    guard(|| {
        *out(out_pmi, "out_pmi")? = compute_pmi(count_xy, count_x, count_y, n_docs)?;
        Ok(())
    })
}

// ---------------------------------------------------------------- graph

/// Builds the progression graph from the training partition of a corpus file
/// using default settings and the given `k`.
#[no_mangle]
pub unsafe extern "C" fn recap_graph_build(
    corpus_path: *const c_char,
    k: usize,
    out_graph: *mut *mut RecapGraph,
) -> RecapStatus {
    guard(|| {
        let slot = out(out_graph, "out_graph")?;
        let corpus = load_corpus(Path::new(text(corpus_path, "corpus_path")?))?;
        let mut config = Config::default();
        config.graph.k = k;
        let (_, graph) = build_graph(&corpus, &config)?;
        *slot = Box::into_raw(Box::new(RecapGraph { inner: graph }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn recap_graph_load(path: *const c_char, out_graph: *mut *mut RecapGraph) -> RecapStatus {
    guard(|| {
        let slot = out(out_graph, "out_graph")?;
        let graph = ProgressionGraph::load(Path::new(text(path, "path")?))?;
        *slot = Box::into_raw(Box::new(RecapGraph { inner: graph }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn recap_graph_save(graph: *const RecapGraph, path: *const c_char) -> RecapStatus {
    guard(|| {
        let g = handle(graph, "graph")?;
        g.inner.save(Path::new(text(path, "path")?))?;
        Ok(())
    })
}

/// Node count, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn recap_graph_node_count(graph: *const RecapGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.inner.nodes.len())
}

/// Edge count, or 0 for NULL.
#[no_mangle]
pub unsafe extern "C" fn recap_graph_edge_count(graph: *const RecapGraph) -> usize {
    graph.as_ref().map_or(0, |g| g.inner.edges.len())
}

#[no_mangle]
pub unsafe extern "C" fn recap_graph_to_json(graph: *const RecapGraph, out_json: *mut *mut c_char) -> RecapStatus {
    guard(|| {
        let slot = out(out_json, "out_json")?;
        *slot = owned_string(handle(graph, "graph")?.inner.to_json()?)?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn recap_graph_free(graph: *mut RecapGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

// ---------------------------------------------------------------- metrics

/// Corpus BLEU-`n` over `count` candidate/reference pairs.
#[no_mangle]
pub unsafe extern "C" fn recap_bleu(
    candidates: *const *const c_char,
    references: *const *const c_char,
    count: usize,
    n: usize,
    out_score: *mut f64,
) -> RecapStatus {
    guard(|| {
        let slot = out(out_score, "out_score")?;
        let c: Vec<Vec<String>> = texts(candidates, count, "candidates")?.iter().map(|s| metric_tokens(s)).collect();
        let r: Vec<Vec<String>> = texts(references, count, "references")?.iter().map(|s| metric_tokens(s)).collect();
        *slot = bleu(&c, &r, n)?;
        Ok(())
    })
}

/// Mean ROUGE-L F over `count` pairs.
#[no_mangle]
pub unsafe extern "C" fn recap_rouge_l(
    candidates: *const *const c_char,
    references: *const *const c_char,
    count: usize,
    out_score: *mut f64,
) -> RecapStatus {
    guard(|| {
        let slot = out(out_score, "out_score")?;
        let c: Vec<Vec<String>> = texts(candidates, count, "candidates")?.iter().map(|s| metric_tokens(s)).collect();
        let r: Vec<Vec<String>> = texts(references, count, "references")?.iter().map(|s| metric_tokens(s)).collect();
        *slot = rouge_l(&c, &r)?;
        Ok(())
    })
}

/// Temporal entity match F1 against a caller-supplied lexicon.
#[no_mangle]
pub unsafe extern "C" fn recap_tem(
    generated: *const *const c_char,
    references: *const *const c_char,
    count: usize,
    lexicon: *const *const c_char,
    lexicon_len: usize,
    out_f1: *mut f64,
) -> RecapStatus {
    guard(|| {
        let slot = out(out_f1, "out_f1")?;
        let g = texts(generated, count, "generated")?;
        let r = texts(references, count, "references")?;
        let lex = texts(lexicon, lexicon_len, "lexicon")?;
        *slot = tem(&g, &r, &lex)?.score.f1;
        Ok(())
    })
}

// ---------------------------------------------------------------- model

/// Loads a Stage-2 checkpoint directory. `graph_path` may be NULL, in which
/// case `<checkpoint_dir>/graph.json` is used.
#[no_mangle]
pub unsafe extern "C" fn recap_model_load(
    checkpoint_dir: *const c_char,
    graph_path: *const c_char,
    out_model: *mut *mut RecapModel,
) -> RecapStatus {
    guard(|| {
        let slot = out(out_model, "out_model")?;
        let dir = PathBuf::from(text(checkpoint_dir, "checkpoint_dir")?);
        let gp = if graph_path.is_null() {
            dir.join("graph.json")
        } else {
            PathBuf::from(text(graph_path, "graph_path")?)
        };
        let graph = ProgressionGraph::load(&gp)?;
        let bundle = Stage2Bundle::load(&dir, &graph)?;
        *slot = Box::into_raw(Box::new(RecapModel { bundle, graph }));
        Ok(())
    })
}

/// Generates a report for one 8-bit grayscale image, row-major. The prior
/// study is optional: pass NULL `prior_pixels` for a first visit.
/// `prior_report` may be NULL even when a prior image is given.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn recap_model_generate(
    model: *const RecapModel,
    pixels: *const u8,
    height: usize,
    width: usize,
    prior_pixels: *const u8,
    prior_height: usize,
    prior_width: usize,
    prior_report: *const c_char,
    out_report: *mut *mut c_char,
) -> RecapStatus {
    guard(|| {
        let slot = out(out_report, "out_report")?;
        let m = handle(model, "model")?;
        let current = grid(pixels, height, width, "pixels")?.to_mat();
        let prior = if prior_pixels.is_null() {
            None
        } else {
            let img = grid(prior_pixels, prior_height, prior_width, "prior_pixels")?.to_mat();
            let report = if prior_report.is_null() { "" } else { text(prior_report, "prior_report")? };
            Some((img, report))
        };
        let sample = m
            .bundle
            .sample_from_images(&m.graph, &current, prior.as_ref().map(|(i, r)| (i, *r)))?;
        let ids = m.bundle.generate_sample(&sample)?;
        *slot = owned_string(m.bundle.vocab.render(&ids))?;
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn recap_model_free(model: *mut RecapModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
