#ifndef THERMEVAL_H
#define THERMEVAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stddef.h>
#include <stdint.h>

#define THERMEVAL_PROTOCOL_TTNA 0

#define THERMEVAL_PROTOCOL_TTA 1

typedef enum ThermevalStatus {
  THERMEVAL_STATUS_OK = 0,
  THERMEVAL_STATUS_NULL_ARGUMENT = 1,
  THERMEVAL_STATUS_INVALID_ARGUMENT = 2,
  THERMEVAL_STATUS_IO = 3,
  THERMEVAL_STATUS_PARSE = 4,
  THERMEVAL_STATUS_CAPABILITY = 5,
  THERMEVAL_STATUS_DETECTOR = 6,
  THERMEVAL_STATUS_PANIC = 7,
} ThermevalStatus;

// Loaded manifest and ground truth.
typedef struct ThermevalDataset ThermevalDataset;

typedef struct ThermevalDetector ThermevalDetector;

// Collects a callback's detections.
typedef struct ThermevalSink ThermevalSink;

typedef struct ThermevalBox {
  double x_min;
  double y_min;
  double x_max;
  double y_max;
} ThermevalBox;

// What a callback detector is asked to look at. `transform` holds the
// view map `a, b, tx, c, d, ty` from original to view pixels; returned
// boxes are in view pixels. Pointers are valid for the call only.
typedef struct ThermevalViewRequest {
  const char *image_id;
  const char *view_id;
  double transform[6];
  double canvas_width;
  double canvas_height;
} ThermevalViewRequest;

// Returns 0 on success; any other value fails the call that asked.
typedef int32_t (*ThermevalDetectFn)(void *user_data,
                                     const struct ThermevalViewRequest *request,
                                     struct ThermevalSink *sink);

typedef struct ThermevalDetection {
  struct ThermevalBox bbox;
  uint32_t class_id;
  double score;
} ThermevalDetection;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version, static storage.
const char *thermeval_version(void);

// Message of the last failure on this thread, or null. Valid until the
// next failing call on this thread.
const char *thermeval_last_error(void);

// # Safety
// `s` is null or a string returned by this library and not yet freed.
void thermeval_string_free(char *s);

// # Safety
// `a`, `b` and `out` are valid pointers.
enum ThermevalStatus thermeval_iou(const struct ThermevalBox *a,
                                   const struct ThermevalBox *b,
                                   double *out);

// Loads a manifest and its label files.
//
// # Safety
// `manifest_path` is a nul-terminated string; `out` is a valid pointer.
enum ThermevalStatus thermeval_dataset_load(const char *manifest_path,
                                            struct ThermevalDataset **out);

// # Safety
// `ds` is null or a handle from [`thermeval_dataset_load`] not yet freed.
void thermeval_dataset_free(struct ThermevalDataset *ds);

// Number of images, 0 for a null handle.
//
// # Safety
// `ds` is null or a live dataset handle.
size_t thermeval_dataset_image_count(const struct ThermevalDataset *ds);

// Per-class annotation counts as JSON.
//
// # Safety
// `ds` is a live dataset handle; `out_json` is a valid pointer.
enum ThermevalStatus thermeval_dataset_stats(const struct ThermevalDataset *ds, char **out_json);

// Replays a detection file, validated against the dataset.
//
// # Safety
// `path` is a nul-terminated string; `ds` a live dataset; `out` valid.
enum ThermevalStatus thermeval_detector_from_file(const char *path,
                                                  const struct ThermevalDataset *ds,
                                                  struct ThermevalDetector **out);

// Seeded simulated detector over the dataset's ground truth. `noise_json`
// may be null for a noiseless detector with seed 0.
//
// # Safety
// `name` is a nul-terminated string; `noise_json` null or one; `ds` a live
// dataset; `out` valid.
enum ThermevalStatus thermeval_detector_mock(const char *name,
                                             const struct ThermevalDataset *ds,
                                             const char *noise_json,
                                             struct ThermevalDetector **out);

// Wraps a host-language detector. The callback serves every view and is
// called from worker threads unless evaluation runs with one thread.
//
// # Safety
// `name` is a nul-terminated string; `detect` stays callable and
// `user_data` valid until the handle is freed.
enum ThermevalStatus thermeval_detector_callback(const char *name,
                                                 ThermevalDetectFn detect,
                                                 void *user_data,
                                                 struct ThermevalDetector **out);

// # Safety
// `det` is null or a detector handle not yet freed.
void thermeval_detector_free(struct ThermevalDetector *det);

// Adds one detection, in view pixels, from inside a callback.
//
// # Safety
// `sink` is the pointer the callback received; `det` is valid.
enum ThermevalStatus thermeval_sink_push(struct ThermevalSink *sink,
                                         const struct ThermevalDetection *det);

// Evaluates one detector and writes the JSON report to `out_json`.
// `options_json` may be null; `threads` 0 uses the default pool.
//
// # Safety
// Handles are live; `options_json` null or nul-terminated; `out_json` valid.
enum ThermevalStatus thermeval_evaluate(const struct ThermevalDataset *ds,
                                        const struct ThermevalDetector *det,
                                        uint32_t protocol_kind,
                                        const char *options_json,
                                        size_t threads,
                                        char **out_json);

// Evaluates the ensemble of `count` detectors.
//
// # Safety
// `dets` points to `count` live detector handles; otherwise as
// [`thermeval_evaluate`].
enum ThermevalStatus thermeval_evaluate_ensemble(const struct ThermevalDataset *ds,
                                                 const struct ThermevalDetector *const *dets,
                                                 size_t count,
                                                 const char *options_json,
                                                 size_t threads,
                                                 char **out_json);

// Times `iters` calls of the protocol over the dataset's images after
// `warmup` untimed ones and writes the JSON result.
//
// # Safety
// As [`thermeval_evaluate`].
enum ThermevalStatus thermeval_bench(const struct ThermevalDataset *ds,
                                     const struct ThermevalDetector *det,
                                     uint32_t protocol_kind,
                                     const char *options_json,
                                     size_t warmup,
                                     size_t iters,
                                     char **out_json);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* THERMEVAL_H */
