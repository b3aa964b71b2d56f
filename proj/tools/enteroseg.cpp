// enteroseg command line: one subcommand per pipeline stage.
//
// Exit codes: 0 success, 1 pipeline error, 2 usage error. Failures print
// a single JSON line to stderr:
//   {"status":"error","command":"...","kind":"...","message":"..."}

#include <CLI11.hpp>
#include <iostream>
#include <nlohmann/json.hpp>
#include <optional>
#include <string>

#include "enteroseg/pipeline.hpp"

using namespace enteroseg;

namespace {

struct Args {
  std::string config, out, cls;
  int fold = 0;
  std::optional<std::uint64_t> seed;
};

std::string error_kind(const std::exception& e) {
  if (dynamic_cast<const ArtifactError*>(&e)) return "missing_artifact";
  if (dynamic_cast<const NumericError*>(&e)) return "numeric";
  if (dynamic_cast<const ShapeError*>(&e)) return "shape";
  if (dynamic_cast<const FormatError*>(&e)) return "format";
  if (dynamic_cast<const Error*>(&e)) return "invalid";
  return "internal";
}

void print_error(const std::string& command, const std::string& kind, const std::string& message) {
  std::cerr << nlohmann::json{{"status", "error"}, {"command", command}, {"kind", kind}, {"message", message}}.dump()
            << "\n";
}

std::optional<std::uint8_t> class_arg(const Args& a) {
  if (a.cls.empty()) return std::nullopt;
  return static_cast<std::uint8_t>(class_index(a.cls));
}

void print_log(const TrainLog& log) {
  std::cout << "  epochs " << log.epochs.size() << ", best epoch " << log.best_epoch << " (val loss "
            << log.best_val_loss << "), stop: " << log.stop_reason << "\n";
}

int run(const std::string& command, const Args& a) {
  PipelineConfig cfg = a.config.empty() ? PipelineConfig{} : load_pipeline_config(a.config);
  if (a.seed) {
    cfg.seed = *a.seed;
    if (a.config.empty() || !read_json_file(a.config).value("phantom", nlohmann::json::object()).contains("seed")) {
      cfg.phantom.seed = *a.seed;
    }
  }
  Pipeline p(cfg, a.out);
  const auto cls = class_arg(a);

  if (command == "phantom") {
    const auto stats = p.phantom();
    std::cout << "wrote " << stats["patients"].size() << " phantoms to " << (p.out() / "phantom").string() << "\n";
  } else if (command == "convert") {
    const auto rep = p.convert();
    for (const auto& [patient, why] : rep.failed) {
      std::cerr << nlohmann::json{{"status", "warning"}, {"command", command}, {"patient", patient}, {"message", why}}.dump()
                << "\n";
    }
    std::cout << "converted " << rep.converted.size() << " patients, " << rep.failed.size() << " failed; "
              << rep.files_written << " files written, " << rep.files_unchanged << " unchanged\n";
  } else if (command == "split") {
    const auto plan = p.split();
    for (std::size_t f = 0; f < plan.folds.size(); ++f) {
      const auto& fd = plan.folds[f];
      std::cout << "fold " << f << ": " << fd.train.size() << " train, " << fd.val.size() << " val, " << fd.test.size()
                << " test\n";
    }
  } else if (command == "train-coarse") {
    std::cout << "training coarse model, fold " << a.fold << "\n";
    print_log(p.train_coarse(a.fold));
  } else if (command == "predict-coarse") {
    p.predict_coarse(a.fold);
    std::cout << "wrote coarse predictions for fold " << a.fold << "\n";
  } else if (command == "extract-roi") {
    p.extract_roi(a.fold, cls);
    std::cout << "extracted ROIs for fold " << a.fold << "\n";
  } else if (command == "train-organ") {
    for (const auto& [c, log] : p.train_organ(a.fold, cls)) {
      std::cout << class_name(c) << ":\n";
      print_log(log);
    }
  } else if (command == "evaluate") {
    const auto r = p.evaluate(a.fold);
    std::cout << format_table(r.stage2, &r.stage1);
  } else if (command == "report") {
    std::cout << p.report();
  } else if (command == "run") {
    if (cfg.data_root.empty()) p.phantom();
    p.convert();
    p.split();
    print_log(p.train_coarse(a.fold));
    p.predict_coarse(a.fold);
    p.extract_roi(a.fold);
    p.train_organ(a.fold);
    p.evaluate(a.fold);
    std::cout << p.report();
  }
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Two-stage abdominal organ segmentation pipeline"};
  app.require_subcommand(1);
  Args a;
  const std::vector<std::pair<std::string, std::string>> commands = {
      {"phantom", "generate a synthetic NIfTI dataset under <out>/phantom"},
      {"convert", "convert NIfTI pairs to PNG slice and mask trees"},
      {"split", "write the patient-wise k-fold plan"},
      {"train-coarse", "train the multiclass coarse model for a fold"},
      {"predict-coarse", "write coarse label predictions for a fold"},
      {"extract-roi", "cut per-class ROI patch sets from coarse predictions"},
      {"train-organ", "train the per-class refinement models"},
      {"evaluate", "score stage 1 and stage 2 on the fold's test patients"},
      {"report", "stage-over-stage table pooled over evaluated folds"},
      {"run", "every stage in order for one fold"},
  };
  for (const auto& [name, help] : commands) {
    auto* sub = app.add_subcommand(name, help);
    sub->add_option("--config", a.config, "pipeline config (JSON)")->check(CLI::ExistingFile);
    sub->add_option("--out", a.out, "artifact root")->required();
    sub->add_option("--fold", a.fold, "fold index")->check(CLI::NonNegativeNumber);
    sub->add_option("--class", a.cls, "organ class name or index");
    sub->add_option("--seed", a.seed, "override the pipeline seed");
  }
  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    const auto subs = app.get_subcommands();
    print_error(subs.empty() ? "" : subs[0]->get_name(), "usage", e.what());
    return 2;
  }
  const std::string command = app.get_subcommands().at(0)->get_name();
  try {
    return run(command, a);
  } catch (const std::exception& e) {
    print_error(command, error_kind(e), e.what());
    return 1;
  }
}
