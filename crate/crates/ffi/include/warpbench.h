#ifndef WARPBENCH_H
#define WARPBENCH_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

typedef enum WbStatus {
  WB_STATUS_OK = 0,
  // Null pointer, bad UTF-8, or a value outside its domain.
  WB_STATUS_INVALID_ARGUMENT = 1,
  WB_STATUS_FORMAT = 2,
  WB_STATUS_SHAPE = 3,
  WB_STATUS_IO = 4,
  WB_STATUS_DEGENERATE = 5,
  WB_STATUS_PANIC = 6,
} WbStatus;

// Backward map with its validity mask.
typedef struct WbBackwardMap WbBackwardMap;

// Float raster, `height × width × channels`, row-major interleaved.
typedef struct WbFloatMap WbFloatMap;

// 8-bit raster, `height × width × channels`, row-major interleaved.
typedef struct WbImage WbImage;

// Generated sample bundle.
typedef struct WbSample WbSample;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Library version as a static NUL-terminated string.
const char *wb_version(void);

// Message of the last failure on this thread, or null if none. Valid until
// the next failing call on the same thread.
const char *wb_last_error(void);

// # Safety
// `data` must point to `height * width * channels` floats; `out` must be writable.
enum WbStatus wb_fmap_new(size_t height,
                          size_t width,
                          size_t channels,
                          const float *data,
                          struct WbFloatMap **out);

// # Safety
// `path_utf8` must be a NUL-terminated string; `out` must be writable.
enum WbStatus wb_fmap_read(const char *path_utf8, struct WbFloatMap **out);

// # Safety
// `map` must be a live handle; `path_utf8` a NUL-terminated string.
enum WbStatus wb_fmap_write(const struct WbFloatMap *map, const char *path_utf8);

// Any of the out pointers may be null.
//
// # Safety
// `map` must be a live handle.
enum WbStatus wb_fmap_shape(const struct WbFloatMap *map,
                            size_t *height,
                            size_t *width,
                            size_t *channels);

// Borrowed pointer to the map's values; valid while the handle lives.
//
// # Safety
// `map` must be a live handle or null.
const float *wb_fmap_data(const struct WbFloatMap *map);

// # Safety
// `map` must be a handle from this library or null; it is invalid afterwards.
void wb_fmap_free(struct WbFloatMap *map);

// Reads a binary PGM or PPM.
//
// # Safety
// `path_utf8` must be a NUL-terminated string; `out` must be writable.
enum WbStatus wb_image_read(const char *path_utf8, struct WbImage **out);

// # Safety
// `image` must be a live handle; `path_utf8` a NUL-terminated string.
enum WbStatus wb_image_write(const struct WbImage *image, const char *path_utf8);

// Any of the out pointers may be null.
//
// # Safety
// `image` must be a live handle.
enum WbStatus wb_image_shape(const struct WbImage *image,
                             size_t *height,
                             size_t *width,
                             size_t *channels);

// Borrowed pointer to the pixel bytes; valid while the handle lives.
//
// # Safety
// `image` must be a live handle or null.
const uint8_t *wb_image_data(const struct WbImage *image);

// # Safety
// `image` must be a handle from this library or null.
void wb_image_free(struct WbImage *image);

// Builds a backward map from a 2-channel coordinate map and an optional
// 1-channel mask (nonzero is valid). Without a mask, validity is the
// in-range test on the coordinates.
//
// # Safety
// `coords` must be a live handle, `mask` a live handle or null.
enum WbStatus wb_backward_map_new(const struct WbFloatMap *coords,
                                  const struct WbFloatMap *mask,
                                  struct WbBackwardMap **out);

// # Safety
// `coords_path` must be a NUL-terminated string, `mask_path` one or null.
enum WbStatus wb_backward_map_read(const char *coords_path,
                                   const char *mask_path,
                                   struct WbBackwardMap **out);

// Copies of the coordinates (2 channels) and mask (1 channel, 0 or 1).
// Either out pointer may be null.
//
// # Safety
// `map` must be a live handle.
enum WbStatus wb_backward_map_parts(const struct WbBackwardMap *map,
                                    struct WbFloatMap **coords,
                                    struct WbFloatMap **mask);

// # Safety
// `map` must be a handle from this library or null.
void wb_backward_map_free(struct WbBackwardMap *map);

// Local warp angles of a backward map: values `θx, θy, ρx, ρy` (4 channels)
// and the mask of pixels where they are defined (1 channel).
//
// # Safety
// `map` must be a live handle; `values` and `mask` must be writable.
enum WbStatus wb_backward_map_angles(const struct WbBackwardMap *map,
                                     struct WbFloatMap **values,
                                     struct WbFloatMap **mask);

// Resamples `image` through `map`; pixels the map marks invalid are black.
//
// # Safety
// `image` and `map` must be live handles; `out` must be writable.
enum WbStatus wb_rectify(const struct WbImage *image,
                         const struct WbBackwardMap *map,
                         struct WbImage **out);

// Mean end-point error between two backward maps, in normalized units.
//
// # Safety
// Both maps must be live handles; `out` must be writable.
enum WbStatus wb_epe(const struct WbBackwardMap *predicted,
                     const struct WbBackwardMap *truth,
                     double *out);

// Generates a sample with default settings apart from the given fields.
//
// # Safety
// `out` must be writable.
enum WbStatus wb_sample_generate(size_t resolution,
                                 size_t folds,
                                 uint64_t seed,
                                 struct WbSample **out);

// Generates a sample from a JSON configuration; missing fields take defaults.
//
// # Safety
// `config_json` must be a NUL-terminated string; `out` must be writable.
enum WbStatus wb_sample_generate_json(const char *config_json, struct WbSample **out);

// # Safety
// `dir_utf8` must be a NUL-terminated string; `out` must be writable.
enum WbStatus wb_sample_load(const char *dir_utf8, struct WbSample **out);

// # Safety
// `sample` must be a live handle; `dir_utf8` a NUL-terminated string.
enum WbStatus wb_sample_save(const struct WbSample *sample, const char *dir_utf8);

// Copy of the sample's ground-truth backward map.
//
// # Safety
// `sample` must be a live handle; `out` must be writable.
enum WbStatus wb_sample_backward_map(const struct WbSample *sample, struct WbBackwardMap **out);

// Copy of the sample's warped image.
//
// # Safety
// `sample` must be a live handle; `out` must be writable.
enum WbStatus wb_sample_warped(const struct WbSample *sample, struct WbImage **out);

// # Safety
// `sample` must be a handle from this library or null.
void wb_sample_free(struct WbSample *sample);

// Evaluates `predicted` against the sample and writes the report as a JSON
// string, released with [`wb_string_free`]. `options_json` may be null for
// defaults.
//
// # Safety
// `sample` and `predicted` must be live handles, `options_json` a
// NUL-terminated string or null; `out_json` must be writable.
enum WbStatus wb_evaluate(const struct WbSample *sample,
                          const struct WbBackwardMap *predicted,
                          const char *options_json,
                          char **out_json);

// # Safety
// `s` must be a string returned by this library or null.
void wb_string_free(char *s);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* WARPBENCH_H */
