#ifndef CYTOFUSE_H
#define CYTOFUSE_H

/* Generated by cbindgen from crates/ffi/src/lib.rs; do not edit. */

#include <stdarg.h>
#include <stdbool.h>
#include <stddef.h>
#include <stdint.h>
#include <stdlib.h>

/*
 Result of every fallible call.
 */
typedef enum CytofuseStatus {
  CYTOFUSE_STATUS_OK = 0,
  /*
   A required pointer argument was null.
   */
  CYTOFUSE_STATUS_NULL_POINTER = 1,
  /*
   An argument is out of range, or strings are not UTF-8.
   */
  CYTOFUSE_STATUS_INVALID_ARGUMENT = 2,
  /*
   A file could not be read or written.
   */
  CYTOFUSE_STATUS_IO = 3,
  /*
   An input file is malformed.
   */
  CYTOFUSE_STATUS_PARSE = 4,
  /*
   A configuration value violates its constraints.
   */
  CYTOFUSE_STATUS_CONFIG = 5,
  /*
   Gating needed a crop score that the table does not have.
   */
  CYTOFUSE_STATUS_MISSING_SCORES = 6,
  /*
   An image has no known dimensions.
   */
  CYTOFUSE_STATUS_UNKNOWN_IMAGE = 7,
  /*
   Index past the end of a list.
   */
  CYTOFUSE_STATUS_OUT_OF_RANGE = 8,
  /*
   The library panicked; this is a bug.
   */
  CYTOFUSE_STATUS_INTERNAL = 9,
} CytofuseStatus;

typedef enum CytofuseSource {
  CYTOFUSE_SOURCE_DETECTOR_A = 0,
  CYTOFUSE_SOURCE_DETECTOR_B = 1,
  CYTOFUSE_SOURCE_HEATMAP = 2,
  CYTOFUSE_SOURCE_MERGED = 3,
} CytofuseSource;

typedef enum CytofuseApVariant {
  CYTOFUSE_AP_VARIANT_ALL_POINT = 0,
  CYTOFUSE_AP_VARIANT_POINT101 = 1,
} CytofuseApVariant;

/*
 Opaque crop-classifier score table.
 */
typedef struct CytofuseCropScores CytofuseCropScores;

/*
 Opaque list of detections.
 */
typedef struct CytofuseDetections CytofuseDetections;

/*
 Opaque list of ground-truth boxes.
 */
typedef struct CytofuseGroundTruths CytofuseGroundTruths;

/*
 Opaque 2-D grid.
 */
typedef struct CytofuseHeatmap CytofuseHeatmap;

/*
 Axis-aligned box given by center and size, in pixels.
 */
typedef struct CytofuseBox {
  double cx;
  double cy;
  double w;
  double h;
} CytofuseBox;

typedef struct CytofuseFusionConfig {
  double distance_threshold;
  double singleton_confidence_threshold;
  double merged_box_size;
} CytofuseFusionConfig;

typedef struct CytofusePeakConfig {
  /*
   Odd window side.
   */
  size_t kernel;
  double confidence_threshold;
  double box_size;
} CytofusePeakConfig;

typedef struct CytofusePostprocessConfig {
  double nms_iou;
  uint32_t grid_divisions;
  uint32_t density_cutoff;
  double high_density_threshold;
  double low_density_threshold;
  double gate_confidence_cutoff;
  double gate_binary_threshold;
  double hard_negative_iou;
} CytofusePostprocessConfig;

/*
 Detections left after each post-processing step.
 */
typedef struct CytofuseStepCounts {
  size_t input;
  size_t after_nms;
  size_t after_density;
  size_t after_gate;
} CytofuseStepCounts;

typedef struct CytofuseSummary {
  size_t tp;
  size_t fp;
  size_t fn_;
  double precision;
  double recall;
  double f1;
} CytofuseSummary;

#ifdef __cplusplus
extern "C" {
#endif // __cplusplus

/*
 Copies the last error message of this thread into `buf` (nul-terminated,
 truncated to `capacity`). Returns the message length; 0 if there is none.
 */
size_t cytofuse_last_error_message(char *buf, size_t capacity);

/*
 Static description of a status code.
 */
const char *cytofuse_status_str(enum CytofuseStatus status);

/*
 Library version, static string.
 */
const char *cytofuse_version(void);

/*
 Intersection over union; 0 for boxes that only touch.
 */
double cytofuse_iou(struct CytofuseBox a, struct CytofuseBox b);

double cytofuse_centroid_distance(struct CytofuseBox a, struct CytofuseBox b);

struct CytofuseDetections *cytofuse_detections_new(void);

/*
 Frees a list; null is ignored.
 */
void cytofuse_detections_free(struct CytofuseDetections *list);

enum CytofuseStatus cytofuse_detections_push(struct CytofuseDetections *list,
                                             const char *image_id,
                                             struct CytofuseBox bbox,
                                             double confidence,
                                             enum CytofuseSource source);

/*
 Number of detections; 0 for null.
 */
size_t cytofuse_detections_len(const struct CytofuseDetections *list);

/*
 Reads detection `index`. Any of the out-pointers may be null.
 */
enum CytofuseStatus cytofuse_detections_get(const struct CytofuseDetections *list,
                                            size_t index,
                                            struct CytofuseBox *out_box,
                                            double *out_confidence,
                                            enum CytofuseSource *out_source);

/*
 Copies the image id of detection `index` into `buf`. Returns the id length
 (excluding the nul), or `(size_t)-1` when the list is null or the index is
 out of range.
 */
size_t cytofuse_detections_image_id(const struct CytofuseDetections *list,
                                    size_t index,
                                    char *buf,
                                    size_t capacity);

/*
 Reads a detection CSV; `source` is assigned to every row.
 */
enum CytofuseStatus cytofuse_detections_load(const char *path,
                                             enum CytofuseSource source,
                                             struct CytofuseDetections **out);

enum CytofuseStatus cytofuse_detections_write(const struct CytofuseDetections *list,
                                              const char *path);

/*
 New list with every box replaced by a `size`-sided square at the same center.
 */
enum CytofuseStatus cytofuse_standardize(const struct CytofuseDetections *list,
                                         double size,
                                         struct CytofuseDetections **out);

struct CytofuseGroundTruths *cytofuse_ground_truths_new(void);

void cytofuse_ground_truths_free(struct CytofuseGroundTruths *list);

enum CytofuseStatus cytofuse_ground_truths_push(struct CytofuseGroundTruths *list,
                                                const char *image_id,
                                                struct CytofuseBox bbox);

size_t cytofuse_ground_truths_len(const struct CytofuseGroundTruths *list);

/*
 Reads one YOLO label file; the image id is the file stem.
 */
enum CytofuseStatus cytofuse_ground_truths_load_labels(const char *path,
                                                       uint32_t width,
                                                       uint32_t height,
                                                       struct CytofuseGroundTruths **out);

/*
 Detector A + detector B defaults.
 */
struct CytofuseFusionConfig cytofuse_fusion_config_stage1(void);

/*
 Ensemble + heatmap defaults.
 */
struct CytofuseFusionConfig cytofuse_fusion_config_stage2(void);

enum CytofuseStatus cytofuse_fuse(const struct CytofuseDetections *a,
                                  const struct CytofuseDetections *b,
                                  const struct CytofuseFusionConfig *config,
                                  struct CytofuseDetections **out);

enum CytofuseStatus cytofuse_fuse_two_stage(const struct CytofuseDetections *detector_a,
                                            const struct CytofuseDetections *detector_b,
                                            const struct CytofuseDetections *heatmap,
                                            const struct CytofuseFusionConfig *stage1,
                                            const struct CytofuseFusionConfig *stage2,
                                            struct CytofuseDetections **out);

/*
 Copies `rows * cols` row-major values into a new heatmap.
 */
enum CytofuseStatus cytofuse_heatmap_new(size_t rows,
                                         size_t cols,
                                         const double *values,
                                         struct CytofuseHeatmap **out);

void cytofuse_heatmap_free(struct CytofuseHeatmap *map);

enum CytofuseStatus cytofuse_heatmap_load(const char *path, struct CytofuseHeatmap **out);

enum CytofuseStatus cytofuse_heatmap_write(const struct CytofuseHeatmap *map, const char *path);

size_t cytofuse_heatmap_rows(const struct CytofuseHeatmap *map);

size_t cytofuse_heatmap_cols(const struct CytofuseHeatmap *map);

/*
 Copies up to `capacity` row-major values into `buf`; returns `rows * cols`.
 */
size_t cytofuse_heatmap_values(const struct CytofuseHeatmap *map, double *buf, size_t capacity);

/*
 Training-target rendering for `n` centers given as `xy[2*i], xy[2*i+1]`.
 */
enum CytofuseStatus cytofuse_heatmap_render(const double *xy,
                                            size_t n,
                                            double box_size,
                                            size_t rows,
                                            size_t cols,
                                            struct CytofuseHeatmap **out);

/*
 Resamples `n` maps (taken at `scales[i]`) to `base_rows`×`base_cols` and
 averages them.
 */
enum CytofuseStatus cytofuse_heatmap_multiscale_average(const struct CytofuseHeatmap *const *maps,
                                                        const double *scales,
                                                        size_t n,
                                                        size_t base_rows,
                                                        size_t base_cols,
                                                        struct CytofuseHeatmap **out);

struct CytofusePeakConfig cytofuse_peak_config_default(void);

/*
 Local maxima above the threshold, as heatmap detections of `image_id`.
 */
enum CytofuseStatus cytofuse_extract_peaks(const struct CytofuseHeatmap *map,
                                           const struct CytofusePeakConfig *config,
                                           const char *image_id,
                                           struct CytofuseDetections **out);

struct CytofusePostprocessConfig cytofuse_postprocess_config_default(void);

enum CytofuseStatus cytofuse_nms(const struct CytofuseDetections *list,
                                 double iou_threshold,
                                 struct CytofuseDetections **out);

struct CytofuseCropScores *cytofuse_crop_scores_new(void);

void cytofuse_crop_scores_free(struct CytofuseCropScores *table);

/*
 Score for the detection of `image_id` centered at (`cx`, `cy`).
 */
enum CytofuseStatus cytofuse_crop_scores_insert(struct CytofuseCropScores *table,
                                                const char *image_id,
                                                double cx,
                                                double cy,
                                                double score);

enum CytofuseStatus cytofuse_crop_scores_load(const char *path, struct CytofuseCropScores **out);

/*
 NMS, density filtering and, when `scores` is non-null, classifier gating
 for the detections of one `width`×`height` image. `counts` may be null.
 */
enum CytofuseStatus cytofuse_postprocess_run(const struct CytofuseDetections *list,
                                             uint32_t width,
                                             uint32_t height,
                                             const struct CytofuseCropScores *scores,
                                             const struct CytofusePostprocessConfig *config,
                                             struct CytofuseDetections **out,
                                             struct CytofuseStepCounts *counts);

enum CytofuseStatus cytofuse_summary_metrics(const struct CytofuseDetections *predictions,
                                             const struct CytofuseGroundTruths *ground_truths,
                                             double iou_threshold,
                                             struct CytofuseSummary *out);

enum CytofuseStatus cytofuse_average_precision(const struct CytofuseDetections *predictions,
                                               const struct CytofuseGroundTruths *ground_truths,
                                               double iou_threshold,
                                               enum CytofuseApVariant variant,
                                               double *out);

/*
 Mean AP over IoU 0.50..0.95. `per_threshold`, when non-null, receives the
 10 individual APs.
 */
enum CytofuseStatus cytofuse_map50_95(const struct CytofuseDetections *predictions,
                                      const struct CytofuseGroundTruths *ground_truths,
                                      enum CytofuseApVariant variant,
                                      double *out_map,
                                      double *per_threshold);

#ifdef __cplusplus
}  // extern "C"
#endif  // __cplusplus

#endif  /* CYTOFUSE_H */
