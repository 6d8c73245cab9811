#ifndef PAED_H
#define PAED_H

/* Generated by cbindgen; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum PaedStatus {
  PAED_STATUS_OK = 0,
  PAED_STATUS_NULL_POINTER = 1,
  PAED_STATUS_INVALID_ARGUMENT = 2,
  PAED_STATUS_IO = 3,
  PAED_STATUS_CORRUPT_FILE = 4,
  PAED_STATUS_VERSION_MISMATCH = 5,
  PAED_STATUS_CONFIG = 6,
  PAED_STATUS_NUMERIC = 7,
  PAED_STATUS_INTERNAL = 8,
  PAED_STATUS_PANIC = 9,
} PaedStatus;

typedef struct PaedEvents PaedEvents;

/**
 * A loaded checkpoint.
 */
typedef struct PaedModel PaedModel;

/**
 * Normalized confidence, class-major `[class * n_frames + frame]`.
 */
typedef struct PaedTrack PaedTrack;

/**
 * One detected event, times in seconds.
 */
typedef struct PaedEvent {
  uint32_t class_id;
  double onset_s;
  double offset_s;
  double peak;
} PaedEvent;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Library version as a static NUL-terminated string.
 */
const char *paed_version(void);

/**
 * Message of the last failed call on this thread ("" after a success).
 * Valid until the next paed call on the same thread.
 */
const char *paed_last_error_message(void);

/**
 * Loads a checkpoint file.
 *
 * # Safety
 * `path` must be a NUL-terminated string; `out` must be writable.
 */
enum PaedStatus paed_model_load(const char *path, struct PaedModel **out);

/**
 * # Safety
 * `model` must come from [`paed_model_load`] and not be used afterwards.
 */
void paed_model_free(struct PaedModel *model);

/**
 * Number of event classes, 0 for a null handle.
 *
 * # Safety
 * `model` must be null or a live handle.
 */
size_t paed_model_num_classes(const struct PaedModel *model);

/**
 * Class name owned by the model; valid while the model lives.
 *
 * # Safety
 * `model` must be a live handle and `out` writable.
 */
enum PaedStatus paed_model_class_name(const struct PaedModel *model,
                                      size_t index,
                                      const char **out);

/**
 * Detects events in mono PCM samples in [-1, 1]. `baseline` non-zero
 * selects the median-filter decode.
 *
 * # Safety
 * `model` must be live, `samples` must point to `len` values, `out` writable.
 */
enum PaedStatus paed_detect(const struct PaedModel *model,
                            const double *samples_ptr,
                            size_t len,
                            uint32_t sample_rate,
                            int32_t baseline,
                            struct PaedEvents **out);

/**
 * # Safety
 * `events` must be null or a live handle.
 */
size_t paed_events_len(const struct PaedEvents *events);

/**
 * # Safety
 * `events` must be a live handle and `out` writable.
 */
enum PaedStatus paed_events_get(const struct PaedEvents *events,
                                size_t index,
                                struct PaedEvent *out);

/**
 * # Safety
 * `events` must come from [`paed_detect`] and not be used afterwards.
 */
void paed_events_free(struct PaedEvents *events);

/**
 * Normalized per-class confidence track of the proposed decoder.
 *
 * # Safety
 * As for [`paed_detect`].
 */
enum PaedStatus paed_confidence(const struct PaedModel *model,
                                const double *samples_ptr,
                                size_t len,
                                uint32_t sample_rate,
                                struct PaedTrack **out);

/**
 * # Safety
 * `track` must be null or a live handle.
 */
size_t paed_track_frames(const struct PaedTrack *track);

/**
 * # Safety
 * `track` must be null or a live handle.
 */
size_t paed_track_classes(const struct PaedTrack *track);

/**
 * Seconds between frames, 0 for a null handle.
 *
 * # Safety
 * `track` must be null or a live handle.
 */
double paed_track_hop_s(const struct PaedTrack *track);

/**
 * Borrowed pointer to `classes * frames` scores, class-major; valid while
 * the track lives.
 *
 * # Safety
 * `track` must be a live handle and `out` writable.
 */
enum PaedStatus paed_track_data(const struct PaedTrack *track, const double **out);

/**
 * # Safety
 * `track` must come from [`paed_confidence`] and not be used afterwards.
 */
void paed_track_free(struct PaedTrack *track);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* PAED_H */
