#ifndef DMRIMAP_H
#define DMRIMAP_H

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

// Generator selection for `dmr_model_translate`.
typedef enum DmrDirection {
  DMR_DIRECTION_A_TO_B = 0,
  DMR_DIRECTION_B_TO_A = 1,
} DmrDirection;

// Result of every fallible call.
typedef enum DmrStatus {
  DMR_STATUS_OK = 0,
  DMR_STATUS_NULL_ARGUMENT = 1,
  DMR_STATUS_IO = 2,
  DMR_STATUS_FORMAT = 3,
  DMR_STATUS_INVALID = 4,
  DMR_STATUS_NUMERIC = 5,
  DMR_STATUS_BUFFER_TOO_SMALL = 6,
  DMR_STATUS_PANIC = 7,
} DmrStatus;

// A trained translation model: two generators and two critics.
typedef struct DmrModel DmrModel;

// A 3D scalar volume.
typedef struct DmrVolume DmrVolume;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

// Message of the last failed call on this thread, or null. Valid until the
// next failing call on the same thread.
const char *dmr_last_error(void);

// Library version as a static nul-terminated string.
const char *dmr_version(void);

// Builds a volume from `dims[0]*dims[1]*dims[2]` x-fastest values.
enum DmrStatus dmr_volume_new(const size_t *dims,
                              const double *spacing,
                              const double *data,
                              size_t len,
                              struct DmrVolume **out);

enum DmrStatus dmr_volume_read(const char *path, struct DmrVolume **out);

enum DmrStatus dmr_volume_write(const struct DmrVolume *vol, const char *path);

// Writes the three dimensions into `dims_out`.
enum DmrStatus dmr_volume_dims(const struct DmrVolume *vol, size_t *dims_out);

// Copies the voxel values (x fastest) into `buf`, which holds `cap` values.
enum DmrStatus dmr_volume_copy_data(const struct DmrVolume *vol, double *buf, size_t cap);

void dmr_volume_free(struct DmrVolume *vol);

// Weighted least-squares tensor fit of `n` volumes with b-values `bvals[n]`
// and unit directions `dirs[3n]`. `mask` may be null. Returns FA and MD maps.
enum DmrStatus dmr_fit_dti(const struct DmrVolume *const *dwi,
                           size_t n,
                           const double *bvals,
                           const double *dirs,
                           const struct DmrVolume *mask,
                           struct DmrVolume **fa_out,
                           struct DmrVolume **md_out);

// Fractional anisotropy of three eigenvalues (any order).
double dmr_fa(double l1, double l2, double l3);

// Mean diffusivity of three eigenvalues.
double dmr_md(double l1, double l2, double l3);

// Mean SSIM of two `width x height` row-major images. A non-finite `range`
// estimates the dynamic range from the images.
enum DmrStatus dmr_mssim(const double *a,
                         const double *b,
                         size_t width,
                         size_t height,
                         double range,
                         double *out);

// Loads a checkpoint directory written by training.
enum DmrStatus dmr_model_load(const char *dir, struct DmrModel **out);

// Translates one `width x height` image into `out` (same size).
enum DmrStatus dmr_model_translate(const struct DmrModel *model,
                                   enum DmrDirection direction,
                                   const double *input,
                                   size_t width,
                                   size_t height,
                                   double *out);

void dmr_model_free(struct DmrModel *model);

// Demons registration of `moving` onto `fixed` with default settings.
// Writes the displacement components and the resampled moving image,
// each `width * height` values. `resampled` may be null.
enum DmrStatus dmr_register(const double *moving,
                            const double *fixed,
                            size_t width,
                            size_t height,
                            double *dx_out,
                            double *dy_out,
                            double *resampled);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* DMRIMAP_H */
