#ifndef LENSOPT_H
#define LENSOPT_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum LensoptStatus {
  LENSOPT_STATUS_OK = 0,
  LENSOPT_STATUS_NULL_ARGUMENT = 1,
  LENSOPT_STATUS_INVALID_TEXT = 2,
  LENSOPT_STATUS_PARSE = 3,
  LENSOPT_STATUS_NUMERICAL = 4,
  LENSOPT_STATUS_INVALID_ARGUMENT = 5,
  LENSOPT_STATUS_BUFFER_TOO_SMALL = 6,
  LENSOPT_STATUS_PANIC = 7,
} LensoptStatus;

/**
 * Opaque lens system.
 */
typedef struct LensoptSystem LensoptSystem;

/**
 * Loss terms of a system against its design targets.
 */
typedef struct LensoptLosses {
  double spot;
  double ttl;
  double effl;
  double gap;
  double dist;
  double optic;
} LensoptLosses;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null after a success.
 * The pointer stays valid until the next call on the same thread.
 */
const char *lensopt_last_error(void);

/**
 * Parses a prescription from nul-terminated UTF-8 text.
 *
 * # Safety
 * `text` must be a valid C string and `out` writable.
 */
enum LensoptStatus lensopt_system_parse(const char *text, struct LensoptSystem **out);

/**
 * # Safety
 * `sys` must come from this library and not be used afterwards; null is ignored.
 */
void lensopt_system_free(struct LensoptSystem *sys);

/**
 * # Safety
 * `sys` must be a live handle and `out` writable.
 */
enum LensoptStatus lensopt_system_surface_count(const struct LensoptSystem *sys, size_t *out);

/**
 * # Safety
 * `sys` must be a live handle and `out` writable.
 */
enum LensoptStatus lensopt_system_wavelength_count(const struct LensoptSystem *sys, size_t *out);

/**
 * Paraxial effective focal length at the reference wavelength, mm.
 *
 * # Safety
 * `sys` must be a live handle and `out` writable.
 */
enum LensoptStatus lensopt_system_effl(const struct LensoptSystem *sys, double *out);

/**
 * Total track length from the first surface to the image plane, mm.
 *
 * # Safety
 * `sys` must be a live handle and `out` writable.
 */
enum LensoptStatus lensopt_system_ttl(const struct LensoptSystem *sys, double *out);

/**
 * Writes the prescription text; release it with `lensopt_string_free`.
 *
 * # Safety
 * `sys` must be a live handle and `out` writable.
 */
enum LensoptStatus lensopt_system_emit(const struct LensoptSystem *sys, char **out);

/**
 * # Safety
 * `s` must come from this library and not be used afterwards; null is ignored.
 */
void lensopt_string_free(char *s);

/**
 * Loss terms over the design fields with a `pupil`×`pupil` sampling grid.
 *
 * # Safety
 * `sys` must be a live handle and `out` writable.
 */
enum LensoptStatus lensopt_system_losses(const struct LensoptSystem *sys,
                                         size_t pupil,
                                         struct LensoptLosses *out);

/**
 * Normalized PSF of every wavelength on a `side`×`side` grid centred on the
 * reference chief ray. `buffer` receives the channels one after another,
 * each row-major with rows along y, and must hold `len` ≥ wavelengths·side²
 * values.
 *
 * # Safety
 * `sys` must be a live handle and `buffer` writable for `len` values.
 */
enum LensoptStatus lensopt_system_psf(const struct LensoptSystem *sys,
                                      double field_deg,
                                      double azimuth_deg,
                                      size_t side,
                                      double pitch_um,
                                      size_t pupil,
                                      double *buffer,
                                      size_t len);

/**
 * Runs `steps` optimizer steps at base rate `rate` against the system's
 * design targets and returns the result as a new handle.
 *
 * # Safety
 * `sys` must be a live handle and `out` writable.
 */
enum LensoptStatus lensopt_system_optimize(const struct LensoptSystem *sys,
                                           size_t steps,
                                           double rate,
                                           struct LensoptSystem **out);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LENSOPT_H */
