#ifndef MAPNAV_H
#define MAPNAV_H

/* Generated by cbindgen from src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum NavStatus {
  NAV_STATUS_OK = 0,
  NAV_STATUS_NULL_POINTER = 1,
  NAV_STATUS_INVALID_ARGUMENT = 2,
  NAV_STATUS_CONFIG = 3,
  NAV_STATUS_MISSING_CHECKPOINT = 4,
  NAV_STATUS_RUNTIME = 5,
  NAV_STATUS_PANIC = 6,
} NavStatus;

/**
 * Opaque environment.
 */
typedef struct NavMap NavMap;

/**
 * Opaque planned action sequence.
 */
typedef struct NavPlan NavPlan;

/**
 * Opaque simulator: a map, actuation noise and its own random stream.
 */
typedef struct NavSim NavSim;

/**
 * Position and heading (0 east, 1 north, 2 west, 3 south).
 */
typedef struct NavPose {
  uint32_t x;
  uint32_t y;
  uint8_t heading;
} NavPose;

/**
 * Mean and 75th percentile of final distance, and percent within the success radius.
 */
typedef struct NavSummary {
  double mean;
  double p75;
  double success;
} NavSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/**
 * Message of the last failed call on this thread, or null if none. Free
 * the result with [`nav_string_free`].
 */
char *nav_last_error_message(void);

/**
 * # Safety
 * `s` must come from this library, or be null.
 */
void nav_string_free(char *s);

/**
 * `style`: 0 rooms, 1 maze, 2 open.
 *
 * # Safety
 * `out` must be a valid pointer.
 */
enum NavStatus nav_map_generate(uint64_t seed,
                                uint32_t width,
                                uint32_t height,
                                uint32_t style,
                                struct NavMap **out);

/**
 * # Safety
 * `json` must be a nul-terminated string and `out` a valid pointer.
 */
enum NavStatus nav_map_from_json(const char *json, struct NavMap **out);

/**
 * # Safety
 * `map` must be a live handle and `out` a valid pointer.
 */
enum NavStatus nav_map_to_json(const struct NavMap *map, char **out);

/**
 * # Safety
 * `map`, `width` and `height` must be valid pointers.
 */
enum NavStatus nav_map_size(const struct NavMap *map, uint32_t *width, uint32_t *height);

/**
 * # Safety
 * `map` and `free` must be valid pointers.
 */
enum NavStatus nav_map_is_free(const struct NavMap *map, uint32_t x, uint32_t y, bool *free);

/**
 * # Safety
 * `map` must come from this library, or be null.
 */
void nav_map_free(struct NavMap *map);

/**
 * Shortest action sequence from `start` to the goal cell.
 *
 * # Safety
 * `map` must be a live handle and `out` a valid pointer.
 */
enum NavStatus nav_oracle_plan(const struct NavMap *map,
                               struct NavPose start,
                               uint32_t goal_x,
                               uint32_t goal_y,
                               struct NavPlan **out);

/**
 * # Safety
 * `plan` must be a live handle, or null (length 0).
 */
size_t nav_plan_len(const struct NavPlan *plan);

/**
 * Copies up to `cap` action codes (0 stay, 1 left, 2 right, 3 forward)
 * into `buf` and stores the plan length in `len`.
 *
 * # Safety
 * `buf` must hold `cap` bytes; `plan` and `len` must be valid.
 */
enum NavStatus nav_plan_actions(const struct NavPlan *plan, uint8_t *buf, size_t cap, size_t *len);

/**
 * # Safety
 * `plan` must come from this library, or be null.
 */
void nav_plan_free(struct NavPlan *plan);

/**
 * Copies `map` into a new simulator whose Forward fails with `p_fail`.
 *
 * # Safety
 * `map` must be a live handle and `out` a valid pointer.
 */
enum NavStatus nav_sim_new(const struct NavMap *map,
                           double p_fail,
                           uint64_t seed,
                           struct NavSim **out);

/**
 * Applies `action` to `pose` in place. `forward_failed` may be null.
 *
 * # Safety
 * `sim` and `pose` must be valid pointers.
 */
enum NavStatus nav_sim_step(struct NavSim *sim,
                            struct NavPose *pose,
                            uint32_t action,
                            bool *forward_failed);

/**
 * # Safety
 * `sim` must come from this library, or be null.
 */
void nav_sim_free(struct NavSim *sim);

/**
 * # Safety
 * `distances` must hold `n` values and `out` must be valid.
 */
enum NavStatus nav_summarize(const uint32_t *distances, size_t n, struct NavSummary *out);

/**
 * Validates an experiment configuration; an empty object gives the defaults.
 *
 * # Safety
 * `json` must be a nul-terminated string.
 */
enum NavStatus nav_config_validate(const char *json);

/**
 * Policy evaluation with checkpoints from `out_dir`; the summary CSV goes
 * to `summary_csv`.
 *
 * # Safety
 * String arguments must be nul-terminated and `summary_csv` valid.
 */
enum NavStatus nav_run_policy_eval(const char *config_json,
                                   const char *out_dir,
                                   char **summary_csv);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* MAPNAV_H */
