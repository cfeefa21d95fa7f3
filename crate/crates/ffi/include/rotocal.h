#ifndef ROTOCAL_H
#define ROTOCAL_H

/* Generated by cbindgen from crates/ffi/src/lib.rs. Do not edit. */

#include <stddef.h>
#include <stdint.h>

typedef enum RotocalDtype {
  ROTOCAL_DTYPE_F32 = 0,
  ROTOCAL_DTYPE_F64 = 1,
} RotocalDtype;

typedef enum RotocalObjective {
  ROTOCAL_OBJECTIVE_WHIP = 0,
  ROTOCAL_OBJECTIVE_VARIANCE = 1,
  ROTOCAL_OBJECTIVE_KURTOSIS = 2,
  ROTOCAL_OBJECTIVE_QUANT_LOSS = 3,
} RotocalObjective;

typedef enum RotocalOptimizer {
  ROTOCAL_OPTIMIZER_QR_SGD = 0,
  ROTOCAL_OPTIMIZER_QR_MOMENTUM_SGD = 1,
  ROTOCAL_OPTIMIZER_QR_ADAM = 2,
  ROTOCAL_OPTIMIZER_CAYLEY_SGD = 3,
} RotocalOptimizer;

typedef enum RotocalStatus {
  ROTOCAL_STATUS_OK = 0,
  // Bad argument, shape, or configuration.
  ROTOCAL_STATUS_VALIDATION = 1,
  // Calibration diverged or produced non-finite values.
  ROTOCAL_STATUS_DIVERGENCE = 2,
  // The invariance suite exceeded its tolerance.
  ROTOCAL_STATUS_INVARIANCE_FAILURE = 3,
  ROTOCAL_STATUS_NULL_POINTER = 4,
  // File could not be read, written, or parsed.
  ROTOCAL_STATUS_IO = 5,
  // A panic was caught at the boundary.
  ROTOCAL_STATUS_PANIC = 6,
} RotocalStatus;

// Opaque row-major `f64` matrix.
typedef struct RotocalMatrix RotocalMatrix;

// Calibration settings. Fill with [`rotocal_config_default`] and override.
typedef struct RotocalCalibrationConfig {
  enum RotocalObjective objective;
  enum RotocalOptimizer optimizer;
  double lr;
  // Momentum coefficient; ignored by plain SGD.
  double momentum;
  size_t epochs;
  size_t batch_size;
  double token_sample_ratio;
  // Step cap; 0 means no cap.
  size_t max_iters;
  // Bits for the quantization metrics and the quant_loss objective.
  uint8_t bits;
  // Outlier threshold; values ≤ 0 select the automatic 4·RMS threshold.
  double tau_outlier;
  uint64_t seed;
} RotocalCalibrationConfig;

// Message for the last failed call on this thread, or NULL if the last call
// succeeded. Release with [`rotocal_string_free`].
char *rotocal_last_error_message(void);

// # Safety
// `s` must come from this library and not have been freed already. NULL is ignored.
void rotocal_string_free(char *s);

// Library version as a static NUL-terminated string.
const char *rotocal_version(void);

// Creates a `rows × cols` matrix from row-major `data`, or zeros when `data` is NULL.
//
// # Safety
// `data`, when non-null, must point to `rows * cols` doubles. `out` must be writable.
enum RotocalStatus rotocal_matrix_new(size_t rows,
                                      size_t cols,
                                      const double *data,
                                      struct RotocalMatrix **out);

// # Safety
// `m` must come from this library and not have been freed already. NULL is ignored.
void rotocal_matrix_free(struct RotocalMatrix *m);

// Row count; 0 for NULL.
//
// # Safety
// `m` must be NULL or a live handle.
size_t rotocal_matrix_rows(const struct RotocalMatrix *m);

// Column count; 0 for NULL.
//
// # Safety
// `m` must be NULL or a live handle.
size_t rotocal_matrix_cols(const struct RotocalMatrix *m);

// Copies the row-major entries into `out`, which must hold exactly `len = rows * cols` doubles.
//
// # Safety
// `m` must be a live handle and `out` must point to `len` writable doubles.
enum RotocalStatus rotocal_matrix_copy_data(const struct RotocalMatrix *m, double *out, size_t len);

// `‖MᵀM − I‖_F` of a square matrix.
//
// # Safety
// `m` must be a live handle and `out` writable.
enum RotocalStatus rotocal_orthogonality_error(const struct RotocalMatrix *m, double *out);

// Random sign Hadamard rotation of size `n` (a power of two).
//
// # Safety
// `out` must be writable.
enum RotocalStatus rotocal_random_hadamard(size_t n, uint64_t seed, struct RotocalMatrix **out);

// Orthogonal factor of the Householder QR of a square matrix, with `diag(R) ≥ 0`.
//
// # Safety
// `a` must be a live handle and `out` writable.
enum RotocalStatus rotocal_householder_q(const struct RotocalMatrix *a, struct RotocalMatrix **out);

// `t × c` Laplace(0, b) draws determined by `seed`.
//
// # Safety
// `out` must be writable.
enum RotocalStatus rotocal_sample_laplace(double b,
                                          size_t t,
                                          size_t c,
                                          uint64_t seed,
                                          struct RotocalMatrix **out);

// Reads a tensor file. The stored dtype is written to `dtype_out` when it is non-null.
//
// # Safety
// `path` must be a NUL-terminated string, `out` writable, `dtype_out` NULL or writable.
enum RotocalStatus rotocal_tensor_read(const char *path,
                                       struct RotocalMatrix **out,
                                       enum RotocalDtype *dtype_out);

// # Safety
// `path` must be a NUL-terminated string and `m` a live handle.
enum RotocalStatus rotocal_tensor_write(const char *path,
                                        const struct RotocalMatrix *m,
                                        enum RotocalDtype dtype);

// Per-token asymmetric fake-quantization mse of `x·r` at `bits`; `r` may be NULL for the identity.
//
// # Safety
// `x` must be a live handle, `r` NULL or a live handle, `out` writable.
enum RotocalStatus rotocal_quant_mse(const struct RotocalMatrix *x,
                                     const struct RotocalMatrix *r,
                                     uint8_t bits,
                                     double *out);

// Number of entries of `x` with magnitude above `tau`.
//
// # Safety
// `x` must be a live handle and `out` writable.
enum RotocalStatus rotocal_count_outliers(const struct RotocalMatrix *x, double tau, uint64_t *out);

// Writes the library defaults into `out`.
//
// # Safety
// `out` must be writable.
enum RotocalStatus rotocal_config_default(struct RotocalCalibrationConfig *out);

// Calibrates a rotation for the activation tokens in `x` (rows are tokens).
//
// On success writes the rotation to `rotation_out` and, when
// `report_json_out` is non-null, the JSON report. On
// [`RotocalStatus::Divergence`] no rotation is returned, but the partial
// report is still written to `report_json_out` when one is available.
//
// # Safety
// `x` and `cfg` must be valid; `rotation_out` writable; `report_json_out` NULL or writable.
enum RotocalStatus rotocal_calibrate(const struct RotocalMatrix *x,
                                     const struct RotocalCalibrationConfig *cfg,
                                     struct RotocalMatrix **rotation_out,
                                     char **report_json_out);

// Runs the computational-invariance suite on a toy transformer block.
//
// Writes the worst relative difference to `worst_out` and returns
// [`RotocalStatus::InvarianceFailure`] if it exceeds the tolerance.
//
// # Safety
// `worst_out` must be writable.
enum RotocalStatus rotocal_invariance_suite(uint64_t seed,
                                            size_t hidden,
                                            size_t heads,
                                            size_t seeds,
                                            double *worst_out);

#endif  /* ROTOCAL_H */
