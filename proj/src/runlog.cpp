#include "psgmae/runlog.hpp"

#include <json.hpp>

#include "psgmae/common.hpp"

namespace psgmae {

using ordered = nlohmann::ordered_json;

RunLog::RunLog(const std::filesystem::path& path) {
  out_ = std::make_shared<std::ofstream>(path, std::ios::trunc);
  require(out_->good(), ErrKind::IoFailure,
          "cannot open run log " + path.string());
}

void RunLog::write_line(const std::string& line) {
  if (!out_) return;
  *out_ << line << "\n";
  require(out_->good(), ErrKind::IoFailure, "run log write failed");
}

void RunLog::pretrain_step(const StepRecord& rec) {
  if (!out_) return;
  ordered j;
  j["step"] = rec.step;
  j["l_cos"] = rec.l_cos;
  j["l_mse"] = rec.l_mse;
  j["l_recon"] = rec.l_recon;
  j["l_cl"] = rec.l_cl;
  j["total"] = rec.total;
  j["lr"] = rec.lr;
  j["clipped"] = rec.clipped;
  write_line(j.dump());
}

void RunLog::finetune_step(long step, double loss, double lr, bool clipped) {
  if (!out_) return;
  ordered j;
  j["step"] = step;
  j["loss"] = loss;
  j["lr"] = lr;
  j["clipped"] = clipped;
  write_line(j.dump());
}

void RunLog::validation(const ValRecord& rec) {
  if (!out_) return;
  ordered j;
  j["step"] = rec.step;
  j["val"] = rec.metric;
  j["value"] = rec.value;
  write_line(j.dump());
}

void RunLog::event(const std::string& kind, const std::string& detail) {
  if (!out_) return;
  ordered j;
  j["event"] = kind;
  j["detail"] = detail;
  write_line(j.dump());
}

void RunLog::flush() {
  if (out_) out_->flush();
}

}  // namespace psgmae
