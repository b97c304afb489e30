// End-to-end checks of the command line tool: exit codes, artifacts, and
// snapshot replay. Each test shells out to the built binary.

#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <json.hpp>
#include <sstream>
#include <string>

namespace stdfs = std::filesystem;
using nlohmann::json;

namespace {

const std::string kBin = PSGMAE_CLI;

int run(const std::string& args) {
  const std::string cmd = kBin + " " + args + " >/dev/null 2>&1";
  const int status = std::system(cmd.c_str());
  REQUIRE(status != -1);
  return WEXITSTATUS(status);
}

stdfs::path work_root() {
  static const stdfs::path root = [] {
    stdfs::path p = stdfs::temp_directory_path() /
                    ("psgmae-cli-" + std::to_string(::getpid()));
    stdfs::remove_all(p);
    stdfs::create_directories(p);
    return p;
  }();
  return root;
}

// Tiny corpus + short pre-training shared across cases.
const std::string kTinyModel =
    "--n-patch 4 --d-model 16 --layers 1 --heads 2 --ff 32 --dec-hidden 24 "
    "--kernels 3 --head-channels 4 --head-mlp-hidden 8";

stdfs::path corpus() {
  static const stdfs::path dir = [] {
    stdfs::path d = work_root() / "data";
    REQUIRE(run("gen-data --out-dir " + d.string() +
                " --subjects 4 --epochs 30 --channels 5 --sampling-hz 20 "
                "--epoch-seconds 2 --label-mode both --seed 7") == 0);
    return d;
  }();
  return dir;
}

stdfs::path pretrained() {
  static const stdfs::path dir = [] {
    stdfs::path d = work_root() / "pre";
    REQUIRE(run("pretrain --data-dir " + corpus().string() + " --out-dir " +
                d.string() + " " + kTinyModel +
                " --steps 30 --val-interval 15 --batch-size 8 --seed 3") == 0);
    return d;
  }();
  return dir;
}

std::string slurp(const stdfs::path& p) {
  std::ifstream in(p, std::ios::binary);
  REQUIRE(in.good());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

long line_count(const stdfs::path& p) {
  const std::string text = slurp(p);
  long n = 0;
  for (const char ch : text) n += ch == '\n';
  return n;
}

}  // namespace

TEST_CASE("gen-data writes a recording set plus snapshot") {
  const stdfs::path d = corpus();
  CHECK(stdfs::exists(d / "manifest.json"));
  CHECK(stdfs::exists(d / "snapshot.ini"));
  CHECK(stdfs::exists(d / "rec_0003_synth-003.psgr"));
  CHECK(!stdfs::exists(d / ".lock"));  // released on exit
}

TEST_CASE("argument errors exit with code 2") {
  CHECK(run("") == 2);
  CHECK(run("pretrain --bogus-flag") == 2);
  CHECK(run("finetune --data-dir x --out-dir " +
            (work_root() / "t_task").string() +
            " --checkpoint y --task nope") == 2);
  CHECK(run("gen-data --out-dir " + (work_root() / "t_rate").string() +
            " --subjects 1 --epochs 4 --sampling-hz 10 --epoch-seconds 1"
            " --label-mode osa2 --event-rate 1.5") == 2);
  CHECK(run("--help") == 0);
}

TEST_CASE("missing or corrupt inputs exit with code 3") {
  CHECK(run("pretrain --data-dir /nonexistent --out-dir " +
            (work_root() / "t_miss").string() + " " + kTinyModel) == 3);
  // manifest.json is not a checkpoint
  CHECK(run("evaluate --data-dir " + corpus().string() + " --out-dir " +
            (work_root() / "t_ck").string() + " --checkpoint " +
            (corpus() / "manifest.json").string()) == 3);
}

TEST_CASE("a held lock blocks a second run on the same directory") {
  const stdfs::path d = work_root() / "locked";
  stdfs::create_directories(d);
  std::ofstream(d / ".lock") << "";
  CHECK(run("gen-data --out-dir " + d.string() +
            " --subjects 1 --epochs 4 --sampling-hz 10 --epoch-seconds 1") == 3);
  stdfs::remove(d / ".lock");
}

TEST_CASE("pretraining emits artifacts and replays bitwise from its snapshot") {
  const stdfs::path d = pretrained();
  for (const char* f : {"run.ndjson", "best.psgc", "last.psgc", "report.json",
                        "snapshot.ini"})
    CHECK(stdfs::exists(d / f));
  const json report = json::parse(slurp(d / "report.json"));
  CHECK(report.at("steps_run") == 30);
  CHECK_FALSE(report.at("diverged").get<bool>());

  const stdfs::path replay = work_root() / "pre-replay";
  REQUIRE(run("pretrain --config " + (d / "snapshot.ini").string() +
              " --out-dir " + replay.string()) == 0);
  CHECK(slurp(replay / "run.ndjson") == slurp(d / "run.ndjson"));
  CHECK(slurp(replay / "best.psgc") == slurp(d / "best.psgc"));

  // an explicit flag wins over the same key in the config file
  const stdfs::path override_dir = work_root() / "pre-override";
  REQUIRE(run("pretrain --config " + (d / "snapshot.ini").string() +
              " --out-dir " + override_dir.string() + " --steps 5") == 0);
  CHECK(json::parse(slurp(override_dir / "report.json")).at("steps_run") == 5);
}

TEST_CASE("a zero-step run snapshots the untrained model at the baseline") {
  // paper-scale corpus: 30 s at 100 Hz, so traces are 3000 samples long
  const stdfs::path data = work_root() / "paper-scale";
  REQUIRE(run("gen-data --out-dir " + data.string() +
              " --subjects 1 --epochs 10 --seed 5") == 0);
  const stdfs::path d = work_root() / "untrained";
  REQUIRE(run("pretrain --data-dir " + data.string() + " --out-dir " +
              d.string() + " --steps 0") == 0);
  CHECK(json::parse(slurp(d / "report.json")).at("steps_run") == 0);
  CHECK(slurp(d / "run.ndjson").empty());

  const stdfs::path ev = work_root() / "untrained-eval";
  REQUIRE(run("evaluate --data-dir " + data.string() + " --out-dir " +
              ev.string() + " --checkpoint " + (d / "best.psgc").string() +
              " --split all") == 0);
  const json report = json::parse(slurp(ev / "report.json"));
  const double model = report.at("model_mse").get<double>();
  const double baseline = report.at("baseline_mse").get<double>();
  CHECK(baseline > 0.8);
  CHECK(baseline < 1.2);
  CHECK(model > 0.5 * baseline);  // untrained output stays near predict-zero
  CHECK(model < 2.0 * baseline);

  const stdfs::path rec = work_root() / "untrained-trace";
  REQUIRE(run("reconstruct --data-dir " + data.string() + " --out-dir " +
              rec.string() + " --checkpoint " + (d / "best.psgc").string() +
              " --recording-index 0 --epoch-index 2") == 0);
  CHECK(line_count(rec / "trace.csv") == 3001);  // header + one row per sample
}

TEST_CASE("periodic checkpoints land in the run directory when asked") {
  const stdfs::path d = work_root() / "ckpt-every";
  REQUIRE(run("pretrain --data-dir " + corpus().string() + " --out-dir " +
              d.string() + " " + kTinyModel +
              " --steps 8 --val-interval 8 --batch-size 4 "
              "--checkpoint-every 4") == 0);
  CHECK(stdfs::exists(d / "step-000004.psgc"));
  CHECK(stdfs::exists(d / "step-000008.psgc"));
  CHECK(!stdfs::exists(d / "step-000002.psgc"));
}

TEST_CASE("environment overrides are honoured and snapshotted") {
  const stdfs::path d = work_root() / "envrun";
  ::setenv("PSGMAE_STEPS", "4", 1);
  const int rc = run("pretrain --data-dir " + corpus().string() +
                     " --out-dir " + d.string() + " " + kTinyModel +
                     " --val-interval 15 --batch-size 8 --seed 3");
  ::unsetenv("PSGMAE_STEPS");
  REQUIRE(rc == 0);
  const json report = json::parse(slurp(d / "report.json"));
  CHECK(report.at("steps_run") == 4);
  CHECK(slurp(d / "snapshot.ini").find("steps=4\n") != std::string::npos);
}

TEST_CASE("sgd at an absurd rate diverges with exit code 5") {
  CHECK(run("pretrain --data-dir " + corpus().string() + " --out-dir " +
            (work_root() / "div").string() + " " + kTinyModel +
            " --steps 40 --val-interval 20 --batch-size 8 --optimizer sgd "
            "--lr 1e9 --clip-norm 0") == 5);
}

TEST_CASE("evaluate reports reconstruction error for a pretrain checkpoint") {
  const stdfs::path d = work_root() / "eval";
  REQUIRE(run("evaluate --data-dir " + corpus().string() + " --out-dir " +
              d.string() + " --checkpoint " +
              (pretrained() / "best.psgc").string() + " --split test") == 0);
  const json report = json::parse(slurp(d / "report.json"));
  CHECK(report.at("checkpoint_task") == "pretrain");
  CHECK(report.at("model_mse").get<double>() > 0.0);
  CHECK(report.at("baseline_mse").get<double>() > 0.0);
  CHECK(report.at("per_channel_model").size() == 5);
}

TEST_CASE("reconstruct writes one csv row per sample") {
  const stdfs::path d = work_root() / "recon";
  REQUIRE(run("reconstruct --data-dir " + corpus().string() + " --out-dir " +
              d.string() + " --checkpoint " +
              (pretrained() / "best.psgc").string() + " --epoch-index 5") == 0);
  // 2 s at 20 Hz -> 40 samples + header
  CHECK(line_count(d / "trace.csv") == 41);
  CHECK(run("reconstruct --data-dir " + corpus().string() + " --out-dir " +
            (work_root() / "recon-bad").string() + " --checkpoint " +
            (pretrained() / "best.psgc").string() + " --epoch-index 999") == 2);
}

TEST_CASE("finetune trains a head and evaluate scores it") {
  const stdfs::path d = work_root() / "fin";
  REQUIRE(run("finetune --data-dir " + corpus().string() + " --out-dir " +
              d.string() + " --checkpoint " +
              (pretrained() / "best.psgc").string() +
              " --task staging --steps 30 --val-interval 15 --batch-size 8 "
              "--seed 5") == 0);
  const json report = json::parse(slurp(d / "report.json"));
  CHECK(report.at("task") == "staging");
  CHECK(report.at("validation").at("accuracy").get<double>() >= 0.0);

  const stdfs::path ev = work_root() / "fin-eval";
  REQUIRE(run("evaluate --data-dir " + corpus().string() + " --out-dir " +
              ev.string() + " --checkpoint " + (d / "best.psgc").string() +
              " --split test") == 0);
  const json ev_report = json::parse(slurp(ev / "report.json"));
  CHECK(ev_report.at("checkpoint_task") == "staging");
  CHECK(ev_report.at("metrics").at("confusion").size() == 5);
}

TEST_CASE("task without matching labels exits with code 4") {
  const stdfs::path d = work_root() / "osa-only";
  REQUIRE(run("gen-data --out-dir " + d.string() +
              " --subjects 2 --epochs 10 --channels 5 --sampling-hz 20 "
              "--epoch-seconds 2 --label-mode osa2 --seed 9") == 0);
  CHECK(run("finetune --data-dir " + d.string() + " --out-dir " +
            (work_root() / "osa-fin").string() + " --checkpoint " +
            (pretrained() / "best.psgc").string() +
            " --task staging --steps 4 --val-interval 2 --batch-size 4") == 4);
}

TEST_CASE("export flattens logs and pools features") {
  const stdfs::path d = work_root() / "exp";
  REQUIRE(run("export --out-dir " + d.string() + " --log " +
              (pretrained() / "run.ndjson").string()) == 0);
  const std::string csv = slurp(d / "loss.csv");
  CHECK(csv.rfind("step,l_cos,l_mse,l_recon,l_cl,total,lr,clipped\n", 0) == 0);

  CHECK(run("export --out-dir " + (work_root() / "exp-none").string()) == 2);
}

TEST_CASE("import converts a csv sidecar into a recording") {
  const stdfs::path dir = work_root() / "sidecar";
  stdfs::create_directories(dir);
  for (const char* name : {"eeg.csv", "eog.csv"}) {
    std::ofstream out(dir / name);
    out << "value\n";
    for (int i = 0; i < 25; ++i) out << 0.25 * i << "\n";
  }
  std::ofstream(dir / "rec.json")
      << R"({"subject_id":"imported-1","sampling_hz":10,"epoch_seconds":2,)"
      << R"("channels":[{"name":"EEG","file":"eeg.csv"},{"name":"EOG","file":"eog.csv"}],)"
      << R"("label_mode":"none"})";
  const stdfs::path out = work_root() / "imported";
  REQUIRE(run("import --sidecar " + (dir / "rec.json").string() +
              " --out-dir " + out.string()) == 0);
  CHECK(stdfs::exists(out / "imported_1.psgr"));
}

TEST_CASE("gradcheck passes on the reference configuration") {
  CHECK(run("gradcheck --seed 5 --per-tensor 1") == 0);
}
