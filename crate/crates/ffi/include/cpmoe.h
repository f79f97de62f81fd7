#ifndef CPMOE_H
#define CPMOE_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum CpmoeStatus {
  CPMOE_STATUS_OK = 0,
  CPMOE_STATUS_NULL_POINTER = 1,
  CPMOE_STATUS_INVALID_UTF8 = 2,
  CPMOE_STATUS_CHECKPOINT = 3,
  CPMOE_STATUS_SCHEMA = 4,
  CPMOE_STATUS_BAD_WINDOW = 5,
  CPMOE_STATUS_BAD_REQUEST = 6,
  CPMOE_STATUS_MODEL = 7,
  CPMOE_STATUS_BUFFER_TOO_SMALL = 8,
  CPMOE_STATUS_PANIC = 9,
} CpmoeStatus;

// Opaque twin handle.
typedef struct CpmoeTwin CpmoeTwin;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Window length in rows expected by [`cpmoe_twin_predict`].
size_t cpmoe_window_len(void);

// Raw process variables per row.
size_t cpmoe_n_variables(void);

// Pollutants predicted per window.
size_t cpmoe_n_pollutants(void);

// Last error message on this thread, or null. Owned by the library.
const char *cpmoe_last_error(void);

// Opens a checkpoint directory. `schema_path` may be null for the default
// plant schema.
//
// # Safety
// String arguments must be null or NUL-terminated; `out` must be writable.
enum CpmoeStatus cpmoe_twin_open(const char *ckpt_dir,
                                 const char *schema_path,
                                 struct CpmoeTwin **out);

// Releases a handle from [`cpmoe_twin_open`]. Null is ignored.
//
// # Safety
// `twin` must come from [`cpmoe_twin_open`] and not be used afterwards.
void cpmoe_twin_free(struct CpmoeTwin *twin);

// Predicts pollutant concentrations for a row-major `rows x cols` raw
// window. Writes `cpmoe_n_pollutants()` values in the order PM, SO2, NOx,
// HCl, CO, CO2, and the CPSI when `cpsi` is non-null.
//
// # Safety
// `window` must hold `rows * cols` doubles; `pollutants` must hold
// `capacity` doubles.
enum CpmoeStatus cpmoe_twin_predict(const struct CpmoeTwin *twin,
                                    const double *window,
                                    size_t rows,
                                    size_t cols,
                                    double *pollutants,
                                    size_t capacity,
                                    double *cpsi);

// Evaluates a what-if request given as JSON
// (`{"window": [[...]], "action": {"var": delta}}`) and returns the
// scenario as JSON. Free the result with [`cpmoe_string_free`].
//
// # Safety
// `request` must be NUL-terminated; `out` must be writable.
enum CpmoeStatus cpmoe_twin_whatif_json(const struct CpmoeTwin *twin,
                                        const char *request,
                                        char **out);

// Ranks control adjustments for a JSON navigate request
// (`{"window": [[...]], "modules": [...], "top_n": 5}`). Free the result
// with [`cpmoe_string_free`].
//
// # Safety
// `request` must be NUL-terminated; `out` must be writable.
enum CpmoeStatus cpmoe_twin_navigate_json(const struct CpmoeTwin *twin,
                                          const char *request,
                                          char **out);

// Frees a string returned by this library. Null is ignored.
//
// # Safety
// `s` must come from this library and not be freed twice.
void cpmoe_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CPMOE_H */
