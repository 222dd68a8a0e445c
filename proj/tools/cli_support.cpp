#include "cli_support.hpp"

#include <cmath>
#include <cstdio>
#include <fstream>
#include <iomanip>
#include <sstream>

namespace vpcli {

int exit_code_for(vp_status status) {
  switch (status) {
    case VP_OK: return kExitOk;
    case VP_ERR_INVALID_ARGUMENT:
    case VP_ERR_OUT_OF_RANGE: return kExitValidation;
    default: return kExitRuntime;
  }
}

void check(vp_status status, const std::string& stage) {
  if (status != VP_OK) throw CliError(exit_code_for(status), stage + ": " + vp_last_error());
}

std::string take(char* s) {
  if (!s) return {};
  std::string out(s);
  vp_string_free(s);
  return out;
}

std::string read_file(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw CliError(kExitValidation, "cannot read " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  out << text;
  if (!out) throw CliError(kExitRuntime, "cannot write " + path.string());
}

std::string dump(const Json& j) { return j.dump(2) + "\n"; }

std::string resolve_config(const std::string& config_path, const std::vector<std::string>& overrides,
                           const std::string& out_override) {
  std::string text;
  if (config_path.empty()) {
    char* s = nullptr;
    check(vp_config_default(&s), "config");
    text = take(s);
  } else {
    text = read_file(config_path);
  }
  auto sets = overrides;
  if (!out_override.empty()) sets.push_back("out_dir=" + Json(out_override).dump());
  for (const auto& a : sets) {
    char* s = nullptr;
    check(vp_config_set(text.c_str(), a.c_str(), &s), "config --set " + a);
    text = take(s);
  }
  char* s = nullptr;
  check(vp_config_normalize(text.c_str(), &s), "config");
  return take(s);
}

std::string run_id(const std::string& criterion, double ratio) {
  std::ostringstream os;
  os << std::setprecision(6) << ratio * 100.0;
  auto pct = os.str();
  for (auto& ch : pct) {
    if (ch == '.') ch = 'p';
  }
  return criterion + "_r" + pct;
}

Json strip_timing(Json j) {
  if (j.is_object()) {
    j.erase("timing");
    for (auto& [k, v] : j.items()) v = strip_timing(v);
  } else if (j.is_array()) {
    for (auto& v : j) v = strip_timing(v);
  }
  return j;
}

Json run_summary(const std::string& model, const std::string& run, const Json& prune_report, const Json& eval_report,
                 const Json& model_counts) {
  const auto& splits = eval_report.at("splits");
  auto top1 = [&](const char* s) { return splits.contains(s) ? splits[s].at("top1") : Json(nullptr); };
  Json row{{"model", model},
           {"run", run},
           {"criterion", prune_report.is_null() ? Json("none") : prune_report.at("criterion")},
           {"ratio", prune_report.is_null() ? Json(0.0) : prune_report.at("target_ratio")},
           {"achieved_ratio", prune_report.is_null() ? Json(0.0) : prune_report.at("achieved_ratio")},
           {"params", model_counts.at("params")},
           {"macs", model_counts.at("macs")},
           {"valid_top1", top1("valid")},
           {"test_top1", top1("test")},
           {"gap", eval_report.at("gap")},
           {"delta_acc", eval_report.at("delta_acc")},
           {"speedup", prune_report.is_null() ? Json(1.0) : prune_report.at("theoretical_speedup")}};
  Json timing = Json::object();
  if (!prune_report.is_null() && prune_report.contains("timing")) {
    const auto& t = prune_report["timing"];
    if (t.contains("measured_speedup")) timing["measured_speedup"] = t["measured_speedup"];
  }
  if (eval_report.contains("timing")) {
    const auto& t = eval_report["timing"];
    if (t.contains("finetune_time")) timing["finetune_time"] = t["finetune_time"];
    if (t.contains("finetune_seconds")) timing["finetune_seconds"] = t["finetune_seconds"];
  }
  row["timing"] = timing;
  return row;
}

namespace {

std::string fmt(const Json& v, int precision, double scale = 1.0, const char* suffix = "") {
  if (v.is_null()) return "-";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%.*f%s", precision, v.get<double>() * scale, suffix);
  return buf;
}

std::string signed_fmt(const Json& v) {
  if (v.is_null()) return "-";
  char buf[64];
  std::snprintf(buf, sizeof buf, "%+.2f", v.get<double>() * 100.0);
  return buf;
}

std::vector<std::string> cells(const Json& r) {
  const auto& t = r.value("timing", Json::object());
  return {r.at("model").get<std::string>(),
          r.at("criterion").get<std::string>(),
          fmt(r.at("ratio"), 0, 100.0, "%"),
          fmt(r.at("params"), 3, 1e-6, "M"),
          r.at("macs").get<double>() < 1e8 ? fmt(r.at("macs"), 2, 1e-6, "M") : fmt(r.at("macs"), 2, 1e-9, "G"),
          fmt(r.at("valid_top1"), 2, 100.0),
          fmt(r.at("test_top1"), 2, 100.0),
          signed_fmt(r.at("delta_acc")),
          fmt(r.at("speedup"), 2, 1.0, "x"),
          t.contains("finetune_time") ? t["finetune_time"].get<std::string>() : "-"};
}

const std::vector<std::string> kHeader{"model", "criterion", "ratio", "#params", "MACs",
                                       "valid acc", "test acc", "dAcc", "speedup", "FT-time"};

}  // namespace

std::string table_markdown(const std::vector<Json>& rows) {
  std::vector<std::vector<std::string>> all{kHeader};
  for (const auto& r : rows) all.push_back(cells(r));
  std::vector<std::size_t> width(kHeader.size(), 0);
  for (const auto& row : all) {
    for (std::size_t i = 0; i < row.size(); ++i) width[i] = std::max(width[i], row[i].size());
  }
  std::ostringstream os;
  auto line = [&](const std::vector<std::string>& row) {
    os << '|';
    for (std::size_t i = 0; i < row.size(); ++i) os << ' ' << std::left << std::setw(width[i]) << row[i] << " |";
    os << '\n';
  };
  line(all[0]);
  os << '|';
  for (auto w : width) os << std::string(w + 2, '-') << '|';
  os << '\n';
  for (std::size_t i = 1; i < all.size(); ++i) line(all[i]);
  return os.str();
}

std::string table_csv(const std::vector<Json>& rows) {
  std::ostringstream os;
  os << "model,criterion,ratio,params,macs,valid_top1,test_top1,delta_acc,speedup,finetune_seconds\n";
  os.precision(17);
  auto num = [&](const Json& v) {
    if (v.is_null()) return std::string();
    std::ostringstream s;
    s.precision(17);
    s << v.get<double>();
    return s.str();
  };
  for (const auto& r : rows) {
    const auto& t = r.value("timing", Json::object());
    os << r.at("model").get<std::string>() << ',' << r.at("criterion").get<std::string>() << ',' << num(r["ratio"])
       << ',' << r.at("params").get<std::int64_t>() << ',' << r.at("macs").get<std::int64_t>() << ','
       << num(r["valid_top1"]) << ',' << num(r["test_top1"]) << ',' << num(r["delta_acc"]) << ','
       << num(r["speedup"]) << ',' << (t.contains("finetune_seconds") ? num(t["finetune_seconds"]) : "") << '\n';
  }
  return os.str();
}

IncompleteMarker::IncompleteMarker(fs::path path, const std::string& command)
    : path_(std::move(path)), command_(command) {
  write();
}

IncompleteMarker::~IncompleteMarker() {
  if (!done_) {
    try {
      write();
    } catch (...) {
    }
  }
}

void IncompleteMarker::stage(const std::string& name) {
  stage_ = name;
  write();
}

void IncompleteMarker::fail(const std::string& message) {
  message_ = message;
  write();
}

void IncompleteMarker::done() {
  done_ = true;
  std::error_code ec;
  fs::remove(path_, ec);
}

void IncompleteMarker::write() const {
  std::string text = "command: " + command_ + "\nstage: " + (stage_.empty() ? "start" : stage_) + "\n";
  if (!message_.empty()) text += "error: " + message_ + "\n";
  write_file(path_, text);
}

}  // namespace vpcli
