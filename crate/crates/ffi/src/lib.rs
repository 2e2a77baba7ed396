//! C interface to gicl.
//!
//! Handles are opaque pointers created by `*_load`/`*_train` functions and
//! released with the matching `*_free`. Every fallible call returns a status
//! code (`GICL_OK` on success); the message for the most recent failure on
//! the calling thread is available from `gicl_last_error`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use gicl::graph::{load_bundle, synth_sbm, LoadOptions, SbmParams, SplitSpec, TagGraph};
use gicl::pipeline::RunConfig;
use gicl::prompt::PromptTemplate;
use gicl::retriever;
use gicl::scorer::{self, ScoreCache, ScoringContext};
use gicl::trainer::{self, TrainedModel};
use gicl::Error;

pub const GICL_OK: i32 = 0;
pub const GICL_ERR_NULL: i32 = -1;
pub const GICL_ERR_INVALID: i32 = -2;
pub const GICL_ERR_IO: i32 = -3;
pub const GICL_ERR_FORMAT: i32 = -4;
pub const GICL_ERR_SCORER: i32 = -5;
pub const GICL_ERR_TRAINING: i32 = -6;
pub const GICL_ERR_BUFFER: i32 = -7;
pub const GICL_ERR_PANIC: i32 = -99;

/// A loaded text-attributed graph.
pub struct GiclGraph {
    graph: TagGraph,
    bundle_dir: Option<PathBuf>,
}

/// A trained retriever plus the labeled pool it retrieves from.
pub struct GiclModel {
    model: TrainedModel,
    labeled: Vec<usize>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn code_for(e: &Error) -> i32 {
    match e {
        Error::Io { .. } => GICL_ERR_IO,
        Error::Bundle { .. } | Error::ParamFormat(_) | Error::Json(_) | Error::Csv(_) => GICL_ERR_FORMAT,
        Error::Scorer(_) | Error::Coverage { .. } => GICL_ERR_SCORER,
        Error::Training { .. } | Error::NonFinite { .. } => GICL_ERR_TRAINING,
        _ => GICL_ERR_INVALID,
    }
}

struct Fail(i32, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(code_for(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(GICL_ERR_NULL, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => GICL_OK,
        Ok(Err(Fail(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            GICL_ERR_PANIC
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(GICL_ERR_INVALID, format!("{what} is not UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Fail> {
    p.as_ref().ok_or_else(|| null(what))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Fail> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

fn node_index(graph: &TagGraph, id: i64) -> Result<usize, Fail> {
    graph
        .index_of(id)
        .ok_or_else(|| Fail(GICL_ERR_INVALID, format!("unknown node id {id}")))
}

/// Message of the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn gicl_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn gicl_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a graph bundle directory.
///
/// # Safety
/// `dir` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn gicl_graph_load(dir: *const c_char, directed: bool, out: *mut *mut GiclGraph) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let dir = str_arg(dir, "dir")?;
        let graph = load_bundle(dir, LoadOptions { directed })?;
        *out = Box::into_raw(Box::new(GiclGraph {
            graph,
            bundle_dir: Some(PathBuf::from(dir)),
        }));
        Ok(())
    })
}

/// Generates a stochastic block model graph.
///
/// # Safety
/// `out` must be a valid pointer.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn gicl_graph_synth(
    n_nodes: usize,
    n_classes: usize,
    p_in: f64,
    p_out: f64,
    dim: usize,
    noise: f64,
    seed: u64,
    out: *mut *mut GiclGraph,
) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let graph = synth_sbm(&SbmParams {
            n_nodes,
            n_classes,
            p_in,
            p_out,
            dim,
            noise,
            seed,
        })?;
        *out = Box::into_raw(Box::new(GiclGraph { graph, bundle_dir: None }));
        Ok(())
    })
}

/// # Safety
/// `graph` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gicl_graph_free(graph: *mut GiclGraph) {
    if !graph.is_null() {
        drop(Box::from_raw(graph));
    }
}

/// Node and class counts.
///
/// # Safety
/// `graph` must be a live handle; the output pointers may be NULL.
#[no_mangle]
pub unsafe extern "C" fn gicl_graph_info(graph: *const GiclGraph, n_nodes: *mut usize, n_classes: *mut usize) -> i32 {
    guard(|| {
        let g = &ref_arg(graph, "graph")?.graph;
        if let Some(n) = n_nodes.as_mut() {
            *n = g.n_nodes();
        }
        if let Some(c) = n_classes.as_mut() {
            *c = g.n_classes();
        }
        Ok(())
    })
}

fn split_for(g: &GiclGraph, config: &RunConfig) -> Result<SplitSpec, Fail> {
    Ok(config.split(&g.graph, g.bundle_dir.as_deref())?)
}

/// Trains a retriever. `config_json` is a run configuration (NULL for
/// defaults); `cache_path` is a score cache file (NULL keeps it in memory).
///
/// # Safety
/// `graph` must be a live handle, strings NUL-terminated or NULL, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn gicl_train(
    graph: *const GiclGraph,
    config_json: *const c_char,
    cache_path: *const c_char,
    out: *mut *mut GiclModel,
) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let g = ref_arg(graph, "graph")?;
        let config: RunConfig = if config_json.is_null() {
            RunConfig::default()
        } else {
            serde_json::from_str(str_arg(config_json, "config_json")?)
                .map_err(|e| Fail(GICL_ERR_FORMAT, format!("config: {e}")))?
        };
        let cache = if cache_path.is_null() {
            ScoreCache::in_memory()
        } else {
            ScoreCache::open(str_arg(cache_path, "cache_path")?)?
        };
        let split = split_for(g, &config)?;
        let template = PromptTemplate::resolve(&config.template)?;
        let scorer = config.scorer.build(&g.graph)?;
        let mut ctx = ScoringContext::new(&g.graph, scorer.as_ref(), &template, &cache, false)?;
        ctx.render = config.render_options();
        let model = trainer::train(&g.graph, &split, &ctx, &config.train)?;
        *out = Box::into_raw(Box::new(GiclModel {
            model,
            labeled: split.labeled_ids().to_vec(),
        }));
        Ok(())
    })
}

/// Loads a saved model; it retrieves from every labeled node of `graph`.
///
/// # Safety
/// `dir` must be NUL-terminated, `graph` live, `out` valid.
#[no_mangle]
pub unsafe extern "C" fn gicl_model_load(dir: *const c_char, graph: *const GiclGraph, out: *mut *mut GiclModel) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        let g = &ref_arg(graph, "graph")?.graph;
        let model = TrainedModel::load(Path::new(str_arg(dir, "dir")?), g)?;
        *out = Box::into_raw(Box::new(GiclModel {
            model,
            labeled: g.labeled_nodes(),
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `dir` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn gicl_model_save(model: *const GiclModel, dir: *const c_char) -> i32 {
    guard(|| {
        let m = ref_arg(model, "model")?;
        m.model.save(Path::new(str_arg(dir, "dir")?))?;
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn gicl_model_free(model: *mut GiclModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Top-`k` labeled nodes for the node with external id `query_id`, best
/// first. Writes up to `capacity` ids and cosine scores and the hit count
/// to `out_len`; returns `GICL_ERR_BUFFER` (with `out_len` set) if
/// `capacity` is too small.
///
/// # Safety
/// Handles must be live; `out_ids`/`out_scores` must hold `capacity`
/// elements (`out_scores` may be NULL); `out_len` must be valid.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn gicl_retrieve(
    model: *const GiclModel,
    graph: *const GiclGraph,
    query_id: i64,
    k: usize,
    out_ids: *mut i64,
    out_scores: *mut f64,
    capacity: usize,
    out_len: *mut usize,
) -> i32 {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let g = &ref_arg(graph, "graph")?.graph;
        let out_len = out_arg(out_len, "out_len")?;
        let q = node_index(g, query_id)?;
        if m.model.embeddings.n_rows() != g.n_nodes() {
            return Err(Fail(GICL_ERR_INVALID, "model and graph have different node counts".into()));
        }
        let index = retriever::build_index(&m.model.embeddings, &m.labeled)?;
        let hits = retriever::retrieve_for_node(&index, &m.model.embeddings, q, k)?.hits;
        *out_len = hits.len();
        if hits.len() > capacity {
            return Err(Fail(GICL_ERR_BUFFER, format!("{} hits, capacity {capacity}", hits.len())));
        }
        if out_ids.is_null() && !hits.is_empty() {
            return Err(null("out_ids"));
        }
        let ids = g.node_ids();
        for (i, (node, score)) in hits.into_iter().enumerate() {
            *out_ids.add(i) = ids[node];
            if !out_scores.is_null() {
                *out_scores.add(i) = score;
            }
        }
        Ok(())
    })
}

/// `exp(-mean(logprobs))`.
///
/// # Safety
/// `logprobs` must hold `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gicl_perplexity(logprobs: *const f64, len: usize, out: *mut f64) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = scorer::ppl(slice_arg(logprobs, len, "logprobs")?)?;
        Ok(())
    })
}

/// Normalized inverse perplexity of class `gold` among `len` classes.
///
/// # Safety
/// `ppl` must hold `len` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn gicl_utility(ppl: *const f64, len: usize, gold: usize, out: *mut f64) -> i32 {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = scorer::utility(slice_arg(ppl, len, "ppl")?, gold)?;
        Ok(())
    })
}
