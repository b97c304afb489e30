#pragma once

#include <filesystem>
#include <fstream>
#include <memory>
#include <string>

namespace psgmae {

// One optimizer step of a pre-training run.
struct StepRecord {
  long step = 0;
  double l_cos = 0.0;
  double l_mse = 0.0;
  double l_recon = 0.0;
  double l_cl = 0.0;
  double total = 0.0;
  double lr = 0.0;
  bool clipped = false;
};

// One validation measurement (loss for pretraining, a metric for finetuning).
struct ValRecord {
  long step = 0;
  std::string metric;
  double value = 0.0;
};

// Newline-delimited JSON run log. A default-constructed log swallows writes,
// so call sites never need to branch on "logging enabled".
class RunLog {
 public:
  RunLog() = default;
  explicit RunLog(const std::filesystem::path& path);

  bool enabled() const { return out_ != nullptr; }
  void pretrain_step(const StepRecord& rec);
  void finetune_step(long step, double loss, double lr, bool clipped);
  void validation(const ValRecord& rec);
  void event(const std::string& kind, const std::string& detail);
  void flush();

 private:
  void write_line(const std::string& line);
  std::shared_ptr<std::ofstream> out_;
};

}  // namespace psgmae
