#ifndef LCFED_H
#define LCFED_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stdint.h>
#include <stdlib.h>

// Result of every call.
typedef enum LcfedStatus {
  LCFED_STATUS_OK = 0,
  LCFED_STATUS_NULL_POINTER = 1,
  LCFED_STATUS_INVALID_ARGUMENT = 2,
  LCFED_STATUS_SHAPE = 3,
  LCFED_STATUS_CONFIG = 4,
  LCFED_STATUS_FILE = 5,
  LCFED_STATUS_CHECKPOINT = 6,
  LCFED_STATUS_NON_FINITE = 7,
  LCFED_STATUS_EMPTY_DATASET = 8,
  LCFED_STATUS_INTERNAL = 9,
} LcfedStatus;

// Experiment configuration.
typedef struct LcfedConfig LcfedConfig;

// Outcome of a finished or stopped run.
typedef struct LcfedRun LcfedRun;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *lcfed_last_error(void);

// Default configuration.
//
// # Safety
// `out_cfg` must be a valid pointer.
enum LcfedStatus lcfed_config_new(struct LcfedConfig **out_cfg);

// Configuration from `key = value` text.
//
// # Safety
// `text` must be a nul-terminated string and `out_cfg` a valid pointer.
enum LcfedStatus lcfed_config_parse(const char *text, struct LcfedConfig **out_cfg);

// Sets one entry.
//
// # Safety
// `cfg` must come from this library; `key` and `value` must be
// nul-terminated strings.
enum LcfedStatus lcfed_config_set(struct LcfedConfig *cfg, const char *key, const char *value);

// Writes the config digest (nul-terminated) into `buf` of `len` bytes.
//
// # Safety
// `cfg` must come from this library and `buf` hold `len` bytes.
enum LcfedStatus lcfed_config_digest(const struct LcfedConfig *cfg, char *buf, uintptr_t len);

// # Safety
// `cfg` must come from this library or be null.
void lcfed_config_free(struct LcfedConfig *cfg);

// Runs the experiment to completion.
//
// # Safety
// `cfg` must come from this library and `out_run` be a valid pointer.
enum LcfedStatus lcfed_run(const struct LcfedConfig *cfg, struct LcfedRun **out_run);

// Continues a run from a checkpoint; `out_dir` may be null to write next
// to the checkpoint.
//
// # Safety
// String arguments must be nul-terminated; `out_run` must be valid.
enum LcfedStatus lcfed_resume(const char *checkpoint,
                              const char *out_dir,
                              struct LcfedRun **out_run);

// Number of sites and completed rounds of a run.
//
// # Safety
// `run` must come from this library; outputs must be valid pointers.
enum LcfedStatus lcfed_run_info(const struct LcfedRun *run,
                                uintptr_t *out_sites,
                                uint64_t *out_rounds);

// Final averaged IoU and ASSD of `site`.
//
// # Safety
// `run` must come from this library; outputs must be valid pointers.
enum LcfedStatus lcfed_run_site_metrics(const struct LcfedRun *run,
                                        uintptr_t site,
                                        double *out_iou,
                                        double *out_assd);

// # Safety
// `run` must come from this library or be null.
void lcfed_run_free(struct LcfedRun *run);

// Regenerates the summary and curves of a run directory.
//
// # Safety
// `dir` must be a nul-terminated string.
enum LcfedStatus lcfed_emit_report(const char *dir);

// IoU of two `h×w` masks (nonzero bytes are foreground).
//
// # Safety
// `pred` and `gt` must hold `h*w` bytes; `out_value` must be valid.
enum LcfedStatus lcfed_iou(const uint8_t *pred,
                           const uint8_t *gt,
                           uintptr_t h,
                           uintptr_t w,
                           double *out_value);

// Average symmetric surface distance of two `h×w` masks, in pixels.
//
// # Safety
// `pred` and `gt` must hold `h*w` bytes; `out_value` must be valid.
enum LcfedStatus lcfed_assd(const uint8_t *pred,
                            const uint8_t *gt,
                            uintptr_t h,
                            uintptr_t w,
                            double *out_value);

// Peak suppression over `n` planes of `h×w`; `output` may alias nothing.
//
// # Safety
// `input` and `output` must each hold `n*h*w` doubles.
enum LcfedStatus lcfed_nms2d(const double *input,
                             uintptr_t n,
                             uintptr_t h,
                             uintptr_t w,
                             uintptr_t delta,
                             double *output);

// Zero-padded peak-normalized Gaussian spread over `n` planes of `h×w`.
//
// # Safety
// `input` and `output` must each hold `n*h*w` doubles.
enum LcfedStatus lcfed_gaussian_spread(const double *input,
                                       uintptr_t n,
                                       uintptr_t h,
                                       uintptr_t w,
                                       uintptr_t size,
                                       double sigma,
                                       double *output);

// Disagreement of map `site` against all `sites` maps of `len` values each,
// stored one after another in `maps`.
//
// # Safety
// `maps` must hold `sites*len` doubles and `output` `len` doubles.
enum LcfedStatus lcfed_disagreement(const double *maps,
                                    uintptr_t sites,
                                    uintptr_t len,
                                    uintptr_t site,
                                    double *output);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* LCFED_H */
