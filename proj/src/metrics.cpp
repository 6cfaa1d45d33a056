#include <cstdio>

#include "sepdrop/trainer.hpp"

namespace sepdrop {

namespace {
std::string six(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.6g", v);
  return buf;
}
}  // namespace

std::string metrics_header(bool with_models) {
  return with_models ? "epoch,lr,train_loss,train_err,test_err,seconds,models" : "epoch,lr,train_loss,train_err,test_err,seconds";
}

std::string format_metrics_row(const EpochMetrics& m, bool with_models) {
  std::string row = std::to_string(m.epoch) + "," + six(m.lr) + "," + six(m.train_loss) + "," + six(m.train_err) + "," +
                    (m.test_err ? six(*m.test_err) : std::string()) + "," + six(m.seconds);
  if (with_models) row += "," + std::to_string(m.models);
  return row;
}

}  // namespace sepdrop
