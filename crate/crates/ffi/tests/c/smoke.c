#include <stdio.h>
#include <string.h>

#include "proxmmr.h"

#define CHECK(call)                                                            \
  do {                                                                         \
    ProxmmrStatus s_ = (call);                                                 \
    if (s_ != PROXMMR_STATUS_OK) {                                             \
      fprintf(stderr, "%s failed (%d): %s\n", #call, (int)s_,                  \
              proxmmr_last_error());                                           \
      return 1;                                                                \
    }                                                                          \
  } while (0)

int main(void) {
  ProxmmrDataset *data = NULL;
  ProxmmrEstimator *est = NULL;
  ProxmmrEstimator *copy = NULL;
  char *json = NULL;
  double grid[10], held_w[200], truth[10], curve[10], curve2[10], cmse = 0;

  CHECK(proxmmr_demand_sample(500, 7, 1.0, 1.0, &data));
  if (proxmmr_dataset_len(data) != 500) return 1;
  CHECK(proxmmr_fit(data, "ls", "demand", NULL, 3, &est));

  for (int i = 0; i < 10; i++) grid[i] = 10.0 + 20.0 * i / 9.0;
  for (int i = 0; i < 200; i++) held_w[i] = 45.0 + 0.1 * i;
  CHECK(proxmmr_estimator_predict_curve(est, grid, 10, held_w, 200, curve, 10));
  CHECK(proxmmr_demand_truth(grid, 10, 2000, 99, 1.0, truth, 10));
  CHECK(proxmmr_c_mse(curve, truth, 10, &cmse));

  CHECK(proxmmr_estimator_to_json(est, &json));
  CHECK(proxmmr_estimator_from_json(json, &copy));
  CHECK(proxmmr_estimator_predict_curve(copy, grid, 10, held_w, 200, curve2, 10));
  if (memcmp(curve, curve2, sizeof curve) != 0) return 2;

  if (proxmmr_fit(data, "bogus", "demand", NULL, 3, &copy) !=
      PROXMMR_STATUS_CONFIG) {
    return 3;
  }
  if (proxmmr_last_error() == NULL) return 4;

  printf("version %s c_mse %.6f\n", proxmmr_version(), cmse);
  proxmmr_string_free(json);
  proxmmr_estimator_free(copy);
  proxmmr_estimator_free(est);
  proxmmr_dataset_free(data);
  return 0;
}
