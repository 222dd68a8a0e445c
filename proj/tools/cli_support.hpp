#pragma once

#include <json.hpp>

#include <filesystem>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

#include "vitprune/vitprune.h"

namespace vpcli {

namespace fs = std::filesystem;
using Json = nlohmann::json;

constexpr int kExitOk = 0;
constexpr int kExitValidation = 1;
constexpr int kExitRuntime = 2;

/// Failure carrying the process exit code; the message names the stage.
class CliError : public std::runtime_error {
 public:
  CliError(int code, const std::string& message) : std::runtime_error(message), code_(code) {}
  int code() const { return code_; }

 private:
  int code_;
};

int exit_code_for(vp_status status);
/// Throws CliError("<stage>: <library message>") unless status is VP_OK.
void check(vp_status status, const std::string& stage);
/// Copies and releases a library-owned string.
std::string take(char* s);

struct ModelFree {
  void operator()(vp_model* m) const { vp_model_free(m); }
};
struct DatasetFree {
  void operator()(vp_dataset* d) const { vp_dataset_free(d); }
};
struct SplitsFree {
  void operator()(vp_splits* s) const { vp_splits_free(s); }
};
using Model = std::unique_ptr<vp_model, ModelFree>;
using Dataset = std::unique_ptr<vp_dataset, DatasetFree>;
using Splits = std::unique_ptr<vp_splits, SplitsFree>;

std::string read_file(const fs::path& path);
/// Writes atomically enough for our purposes: parent directories are created.
void write_file(const fs::path& path, const std::string& text);
std::string dump(const Json& j);

/// Config text from --config (or library defaults) with --set overrides,
/// validated and normalized. Throws CliError(1) listing every problem.
std::string resolve_config(const std::string& config_path, const std::vector<std::string>& overrides,
                           const std::string& out_override);

/// "hessian_r50", "l1_r87p5".
std::string run_id(const std::string& criterion, double ratio);

/// Recursively drops every "timing" member.
Json strip_timing(Json j);

/// One report-table row from a run's prune and eval reports (prune may be null
/// for the unpruned baseline).
Json run_summary(const std::string& model, const std::string& run, const Json& prune_report, const Json& eval_report,
                 const Json& model_counts);

/// Table with columns model, criterion, ratio, #params, MACs, valid acc, test
/// acc, dAcc, speedup, FT-time.
std::string table_markdown(const std::vector<Json>& rows);
std::string table_csv(const std::vector<Json>& rows);

/// Output tree rooted at --out.
struct Layout {
  fs::path root;
  fs::path config() const { return root / "config.json"; }
  fs::path checkpoints() const { return root / "checkpoints"; }
  fs::path reports() const { return root / "reports"; }
  fs::path curves() const { return root / "curves"; }
  fs::path attn() const { return root / "attn"; }
  fs::path data() const { return root / "data"; }
  fs::path marker() const { return root / "incomplete"; }
  fs::path checkpoint(const std::string& name) const { return checkpoints() / (name + ".ckpt"); }
  fs::path run(const std::string& name) const { return reports() / name; }
};

/// Marks the output tree incomplete for the lifetime of a command; the marker
/// is removed by done() and otherwise keeps the failing stage and message.
class IncompleteMarker {
 public:
  IncompleteMarker(fs::path path, const std::string& command);
  ~IncompleteMarker();
  IncompleteMarker(const IncompleteMarker&) = delete;
  IncompleteMarker& operator=(const IncompleteMarker&) = delete;

  void stage(const std::string& name);
  void fail(const std::string& message);
  void done();

 private:
  void write() const;

  fs::path path_;
  std::string command_, stage_, message_;
  bool done_ = false;
};

}  // namespace vpcli
