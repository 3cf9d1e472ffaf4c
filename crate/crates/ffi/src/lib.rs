//! C ABI over the citykit core.
//!
//! Every fallible call returns a [`CkStatus`]; on failure a message is
//! kept per thread and can be fetched with [`ck_last_error`]. Strings handed
//! out by the library are NUL-terminated UTF-8 and must be released with
//! [`ck_string_free`]; byte buffers with [`ck_bytes_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use citykit::broker::{parse_q, Broker, BrokerError, ContextBroker, Query};
use citykit::data_models::SchemaRegistry;
use citykit::gtfs::{ngsi_to_gtfs, read_feed_zip};
use citykit::routing::{GraphParams, PlanRequest, Router, RoutingError};
use citykit::transformers::ngsi_to_ngsild;
use citykit::NgsiEntity;

/// Result codes shared by all functions.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CkStatus {
    Ok = 0,
    NullArgument = 1,
    InvalidUtf8 = 2,
    InvalidJson = 3,
    NotFound = 4,
    InvalidEntity = 5,
    InvalidQuery = 6,
    SchemaError = 7,
    FeedError = 8,
    Unreachable = 9,
    Internal = 10,
}

/// Context broker handle (in-memory, system clock).
pub struct CkBroker {
    inner: Broker,
}

/// Schema registry handle.
pub struct CkRegistry {
    inner: SchemaRegistry,
}

/// Journey planner handle.
pub struct CkRouter {
    inner: Router,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

type Failure = (CkStatus, String);

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CkStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CkStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CkStatus::Internal
        }
    }
}

/// # Safety
/// `p` is NULL or a valid NUL-terminated string.
unsafe fn text<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err((CkStatus::NullArgument, format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| (CkStatus::InvalidUtf8, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` is NULL or a valid NUL-terminated string.
unsafe fn opt_text<'a>(p: *const c_char, what: &str) -> Result<Option<&'a str>, Failure> {
    if p.is_null() {
        Ok(None)
    } else {
        text(p, what).map(Some)
    }
}

fn json_err(e: serde_json::Error) -> Failure {
    (CkStatus::InvalidJson, e.to_string())
}

fn broker_err(e: BrokerError) -> Failure {
    let status = match &e {
        BrokerError::NotFound(_) => CkStatus::NotFound,
        BrokerError::MalformedPattern(_) | BrokerError::MalformedQuery(_) | BrokerError::TypeMismatch(_) => {
            CkStatus::InvalidQuery
        }
        BrokerError::InvalidEntity(_) => CkStatus::InvalidEntity,
        _ => CkStatus::Internal,
    };
    (status, e.to_string())
}

fn routing_err(e: RoutingError) -> Failure {
    let status = match &e {
        RoutingError::Unreachable | RoutingError::OriginIsolated => CkStatus::Unreachable,
        RoutingError::UnknownStop(_) => CkStatus::NotFound,
        RoutingError::InvalidQuery(_) => CkStatus::InvalidQuery,
        RoutingError::Feed(_) => CkStatus::FeedError,
    };
    (status, e.to_string())
}

/// # Safety
/// `out` is a valid pointer to writable storage.
unsafe fn put_string(out: *mut *mut c_char, s: String) -> Result<(), Failure> {
    if out.is_null() {
        return Err((CkStatus::NullArgument, "output pointer is NULL".into()));
    }
    let c = CString::new(s).map_err(|_| (CkStatus::Internal, "string contains NUL".into()))?;
    *out = c.into_raw();
    Ok(())
}

/// # Safety
/// `out` is a valid pointer to writable storage.
unsafe fn put_json(out: *mut *mut c_char, v: &impl serde::Serialize) -> Result<(), Failure> {
    put_string(out, serde_json::to_string(v).map_err(|e| (CkStatus::Internal, e.to_string()))?)
}

/// # Safety
/// `h` is NULL or a live handle from the matching constructor.
unsafe fn need<'a, T>(h: *const T, what: &str) -> Result<&'a T, Failure> {
    h.as_ref().ok_or((CkStatus::NullArgument, format!("{what} handle is NULL")))
}

/// Message of the last failed call on this thread, or NULL. The returned
/// string is a copy owned by the caller.
#[no_mangle]
pub extern "C" fn ck_last_error() -> *mut c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null_mut(), |c| c.clone().into_raw()))
}

/// Library version, static storage.
#[no_mangle]
pub extern "C" fn ck_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `s` is NULL or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ck_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}

/// # Safety
/// `data`/`len` come from one call of this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ck_bytes_free(data: *mut u8, len: usize) {
    if !data.is_null() {
        drop(Box::from_raw(ptr::slice_from_raw_parts_mut(data, len)));
    }
}

// ---------------------------------------------------------------- broker

#[no_mangle]
pub extern "C" fn ck_broker_new() -> *mut CkBroker {
    Box::into_raw(Box::new(CkBroker { inner: Broker::new() }))
}

/// # Safety
/// `broker` is NULL or a handle from [`ck_broker_new`], not yet freed.
#[no_mangle]
pub unsafe extern "C" fn ck_broker_free(broker: *mut CkBroker) {
    if !broker.is_null() {
        drop(Box::from_raw(broker));
    }
}

/// Number of stored entities; 0 for a NULL handle.
///
/// # Safety
/// `broker` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ck_broker_len(broker: *const CkBroker) -> usize {
    broker.as_ref().map_or(0, |b| b.inner.len())
}

/// Creates or replaces an entity given as NGSI JSON.
///
/// # Safety
/// `broker` is a live handle and `entity_json` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn ck_broker_upsert(broker: *const CkBroker, entity_json: *const c_char) -> CkStatus {
    guard(|| {
        let b = need(broker, "broker")?;
        let e: NgsiEntity = serde_json::from_str(text(entity_json, "entity_json")?).map_err(json_err)?;
        b.inner.upsert_entity(e).map(|_| ()).map_err(broker_err)
    })
}

/// Writes the entity JSON to `*out`; `CkStatus::NotFound` when absent.
///
/// # Safety
/// `broker` is a live handle, `id` a valid C string, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ck_broker_get(broker: *const CkBroker, id: *const c_char, out: *mut *mut c_char) -> CkStatus {
    guard(|| {
        let b = need(broker, "broker")?;
        let id = text(id, "id")?;
        match b.inner.get_entity(id).map_err(broker_err)? {
            Some(e) => put_json(out, &e),
            None => Err((CkStatus::NotFound, format!("entity {id} not found"))),
        }
    })
}

/// Queries entities; each filter argument may be NULL. `q` uses the
/// `attr<op>literal;...` syntax. Writes a JSON array to `*out`.
///
/// # Safety
/// `broker` is a live handle, the strings are NULL or valid, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ck_broker_query(
    broker: *const CkBroker,
    entity_type: *const c_char,
    id_pattern: *const c_char,
    q: *const c_char,
    out: *mut *mut c_char,
) -> CkStatus {
    guard(|| {
        let b = need(broker, "broker")?;
        let mut query = match opt_text(entity_type, "entity_type")? {
            Some(t) => Query::of_type(t),
            None => Query::all(),
        };
        if let Some(p) = opt_text(id_pattern, "id_pattern")? {
            query = query.id_pattern(p);
        }
        if let Some(q) = opt_text(q, "q")? {
            for f in parse_q(q).map_err(broker_err)? {
                query = query.filter(f);
            }
        }
        put_json(out, &b.inner.query_entities(&query).map_err(broker_err)?)
    })
}

/// # Safety
/// `broker` is a live handle and `id` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn ck_broker_delete(broker: *const CkBroker, id: *const c_char) -> CkStatus {
    guard(|| {
        let b = need(broker, "broker")?;
        b.inner.delete_entity(text(id, "id")?).map_err(broker_err)
    })
}

// -------------------------------------------------------------- registry

/// Registry preloaded with the bundled schemas.
#[no_mangle]
pub extern "C" fn ck_registry_bundled() -> *mut CkRegistry {
    Box::into_raw(Box::new(CkRegistry {
        inner: SchemaRegistry::bundled(),
    }))
}

#[no_mangle]
pub extern "C" fn ck_registry_new() -> *mut CkRegistry {
    Box::into_raw(Box::new(CkRegistry {
        inner: SchemaRegistry::new(),
    }))
}

/// # Safety
/// `registry` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ck_registry_free(registry: *mut CkRegistry) {
    if !registry.is_null() {
        drop(Box::from_raw(registry));
    }
}

/// Adds or replaces one schema document.
///
/// # Safety
/// `registry` is a live handle and `schema_json` a valid C string.
#[no_mangle]
pub unsafe extern "C" fn ck_registry_load_schema(registry: *const CkRegistry, schema_json: *const c_char) -> CkStatus {
    guard(|| {
        let r = need(registry, "registry")?;
        r.inner
            .load_schema(text(schema_json, "schema_json")?)
            .map(|_| ())
            .map_err(|e| (CkStatus::SchemaError, e.to_string()))
    })
}

/// Validates one entity. The report JSON goes to `*out` and `*valid` is set
/// to whether it has no violations.
///
/// # Safety
/// `registry` is a live handle, `entity_json` valid, `out` and `valid` writable.
#[no_mangle]
pub unsafe extern "C" fn ck_registry_validate(
    registry: *const CkRegistry,
    entity_json: *const c_char,
    out: *mut *mut c_char,
    valid: *mut bool,
) -> CkStatus {
    guard(|| {
        let r = need(registry, "registry")?;
        if valid.is_null() {
            return Err((CkStatus::NullArgument, "valid is NULL".into()));
        }
        let e: NgsiEntity = serde_json::from_str(text(entity_json, "entity_json")?).map_err(json_err)?;
        let report = r.inner.validate(&e);
        *valid = report.is_valid();
        put_json(out, &report)
    })
}

// ----------------------------------------------------------- transforms

/// NGSI entity JSON to NGSI-LD JSON.
///
/// # Safety
/// Strings are valid C strings, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ck_ngsi_to_ngsild(
    entity_json: *const c_char,
    context_url: *const c_char,
    out: *mut *mut c_char,
) -> CkStatus {
    guard(|| {
        let e: NgsiEntity = serde_json::from_str(text(entity_json, "entity_json")?).map_err(json_err)?;
        let ld = ngsi_to_ngsild(&e, text(context_url, "context_url")?)
            .map_err(|e| (CkStatus::InvalidEntity, e.to_string()))?;
        put_json(out, &ld)
    })
}

/// Builds a GTFS zip from a JSON array of `Gtfs*` entities. Release the
/// buffer with [`ck_bytes_free`].
///
/// # Safety
/// `entities_json` is a valid C string, `out_data` and `out_len` writable.
#[no_mangle]
pub unsafe extern "C" fn ck_ngsi_to_gtfs_zip(
    entities_json: *const c_char,
    out_data: *mut *mut u8,
    out_len: *mut usize,
) -> CkStatus {
    guard(|| {
        if out_data.is_null() || out_len.is_null() {
            return Err((CkStatus::NullArgument, "output pointer is NULL".into()));
        }
        let ents: Vec<NgsiEntity> =
            serde_json::from_str(text(entities_json, "entities_json")?).map_err(json_err)?;
        let (_, zip) = ngsi_to_gtfs(&ents).map_err(|e| (CkStatus::FeedError, e.to_string()))?;
        let boxed = zip.into_boxed_slice();
        *out_len = boxed.len();
        *out_data = Box::into_raw(boxed).cast();
        Ok(())
    })
}

// ---------------------------------------------------------------- router

/// Router over one GTFS zip. `*out` receives the handle.
///
/// # Safety
/// `data` points to `len` readable bytes, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ck_router_from_gtfs_zip(data: *const u8, len: usize, out: *mut *mut CkRouter) -> CkStatus {
    guard(|| {
        if data.is_null() || out.is_null() {
            return Err((CkStatus::NullArgument, "data or out is NULL".into()));
        }
        let bytes = std::slice::from_raw_parts(data, len);
        let feed = read_feed_zip(bytes).map_err(|e| (CkStatus::FeedError, e.to_string()))?;
        let inner = Router::from_feed(feed, GraphParams::default()).map_err(routing_err)?;
        *out = Box::into_raw(Box::new(CkRouter { inner }));
        Ok(())
    })
}

/// # Safety
/// `router` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ck_router_free(router: *mut CkRouter) {
    if !router.is_null() {
        drop(Box::from_raw(router));
    }
}

/// Graph version; 0 for a NULL handle.
///
/// # Safety
/// `router` is NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn ck_router_version(router: *const CkRouter) -> u64 {
    router.as_ref().map_or(0, |r| r.inner.version())
}

/// Plans between two stops. Writes `{version, itineraries}` JSON to `*out`.
///
/// # Safety
/// `router` is a live handle, stop ids valid C strings, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn ck_router_plan(
    router: *const CkRouter,
    from_stop: *const c_char,
    to_stop: *const c_char,
    depart_after: i64,
    max_transfers: u32,
    count: usize,
    out: *mut *mut c_char,
) -> CkStatus {
    guard(|| {
        let r = need(router, "router")?;
        let req = PlanRequest::between_stops(text(from_stop, "from_stop")?, text(to_stop, "to_stop")?, depart_after)
            .max_transfers(max_transfers)
            .count(count.max(1));
        put_json(out, &r.inner.plan(&req).map_err(routing_err)?)
    })
}
