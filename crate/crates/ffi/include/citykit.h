#ifndef CITYKIT_H
#define CITYKIT_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>

/**
 * Result codes shared by all functions.
 */
typedef enum CkStatus {
  CK_STATUS_OK = 0,
  CK_STATUS_NULL_ARGUMENT = 1,
  CK_STATUS_INVALID_UTF8 = 2,
  CK_STATUS_INVALID_JSON = 3,
  CK_STATUS_NOT_FOUND = 4,
  CK_STATUS_INVALID_ENTITY = 5,
  CK_STATUS_INVALID_QUERY = 6,
  CK_STATUS_SCHEMA_ERROR = 7,
  CK_STATUS_FEED_ERROR = 8,
  CK_STATUS_UNREACHABLE = 9,
  CK_STATUS_INTERNAL = 10,
} CkStatus;

/**
 * Context broker handle (in-memory, system clock).
 */
typedef struct CkBroker CkBroker;

/**
 * Schema registry handle.
 */
typedef struct CkRegistry CkRegistry;

/**
 * Journey planner handle.
 */
typedef struct CkRouter CkRouter;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or NULL. The returned
 * string is a copy owned by the caller.
 */
char *ck_last_error(void);

/**
 * Library version, static storage.
 */
const char *ck_version(void);

/**
 * # Safety
 * `s` is NULL or a string returned by this library, not yet freed.
 */
void ck_string_free(char *s);

/**
 * # Safety
 * `data`/`len` come from one call of this library, not yet freed.
 */
void ck_bytes_free(uint8_t *data, uintptr_t len);

struct CkBroker *ck_broker_new(void);

/**
 * # Safety
 * `broker` is NULL or a handle from [`ck_broker_new`], not yet freed.
 */
void ck_broker_free(struct CkBroker *broker);

/**
 * Number of stored entities; 0 for a NULL handle.
 *
 * # Safety
 * `broker` is NULL or a live handle.
 */
uintptr_t ck_broker_len(const struct CkBroker *broker);

/**
 * Creates or replaces an entity given as NGSI JSON.
 *
 * # Safety
 * `broker` is a live handle and `entity_json` a valid C string.
 */
enum CkStatus ck_broker_upsert(const struct CkBroker *broker, const char *entity_json);

/**
 * Writes the entity JSON to `*out`; `CkStatus::NotFound` when absent.
 *
 * # Safety
 * `broker` is a live handle, `id` a valid C string, `out` writable.
 */
enum CkStatus ck_broker_get(const struct CkBroker *broker, const char *id, char **out);

/**
 * Queries entities; each filter argument may be NULL. `q` uses the
 * `attr<op>literal;...` syntax. Writes a JSON array to `*out`.
 *
 * # Safety
 * `broker` is a live handle, the strings are NULL or valid, `out` writable.
 */
enum CkStatus ck_broker_query(const struct CkBroker *broker,
                              const char *entity_type,
                              const char *id_pattern,
                              const char *q,
                              char **out);

/**
 * # Safety
 * `broker` is a live handle and `id` a valid C string.
 */
enum CkStatus ck_broker_delete(const struct CkBroker *broker, const char *id);

/**
 * Registry preloaded with the bundled schemas.
 */
struct CkRegistry *ck_registry_bundled(void);

struct CkRegistry *ck_registry_new(void);

/**
 * # Safety
 * `registry` is NULL or a live handle.
 */
void ck_registry_free(struct CkRegistry *registry);

/**
 * Adds or replaces one schema document.
 *
 * # Safety
 * `registry` is a live handle and `schema_json` a valid C string.
 */
enum CkStatus ck_registry_load_schema(const struct CkRegistry *registry, const char *schema_json);

/**
 * Validates one entity. The report JSON goes to `*out` and `*valid` is set
 * to whether it has no violations.
 *
 * # Safety
 * `registry` is a live handle, `entity_json` valid, `out` and `valid` writable.
 */
enum CkStatus ck_registry_validate(const struct CkRegistry *registry,
                                   const char *entity_json,
                                   char **out,
                                   bool *valid);

/**
 * NGSI entity JSON to NGSI-LD JSON.
 *
 * # Safety
 * Strings are valid C strings, `out` writable.
 */
enum CkStatus ck_ngsi_to_ngsild(const char *entity_json, const char *context_url, char **out);

/**
 * Builds a GTFS zip from a JSON array of `Gtfs*` entities. Release the
 * buffer with [`ck_bytes_free`].
 *
 * # Safety
 * `entities_json` is a valid C string, `out_data` and `out_len` writable.
 */
enum CkStatus ck_ngsi_to_gtfs_zip(const char *entities_json,
                                  uint8_t **out_data,
                                  uintptr_t *out_len);

/**
 * Router over one GTFS zip. `*out` receives the handle.
 *
 * # Safety
 * `data` points to `len` readable bytes, `out` writable.
 */
enum CkStatus ck_router_from_gtfs_zip(const uint8_t *data, uintptr_t len, struct CkRouter **out);

/**
 * # Safety
 * `router` is NULL or a live handle.
 */
void ck_router_free(struct CkRouter *router);

/**
 * Graph version; 0 for a NULL handle.
 *
 * # Safety
 * `router` is NULL or a live handle.
 */
uint64_t ck_router_version(const struct CkRouter *router);

/**
 * Plans between two stops. Writes `{version, itineraries}` JSON to `*out`.
 *
 * # Safety
 * `router` is a live handle, stop ids valid C strings, `out` writable.
 */
enum CkStatus ck_router_plan(const struct CkRouter *router,
                             const char *from_stop,
                             const char *to_stop,
                             int64_t depart_after,
                             uint32_t max_transfers,
                             uintptr_t count,
                             char **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CITYKIT_H */
