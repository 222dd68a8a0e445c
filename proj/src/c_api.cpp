#include "vitprune/vitprune.h"

#include <cmath>
#include <cstdlib>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <new>
#include <string>

#include "vitprune/attention.hpp"
#include "vitprune/experiment.hpp"

struct vp_model {
  vp::TransformerModel model;
};

struct vp_dataset {
  vp::DomainDataset data;
};

struct vp_splits {
  vp::Splits splits;
};

namespace {

thread_local std::string g_last_error;

vp_status fail(vp_status status, const std::string& message) {
  g_last_error = message;
  return status;
}

template <class F>
vp_status guarded(F&& f) {
  g_last_error.clear();
  try {
    f();
    return VP_OK;
  } catch (const vp::NumericError& e) {
    return fail(VP_ERR_NUMERIC, e.what());
  } catch (const vp::IoError& e) {
    return fail(VP_ERR_IO, e.what());
  } catch (const std::filesystem::filesystem_error& e) {
    return fail(VP_ERR_IO, e.what());
  } catch (const nlohmann::json::exception& e) {
    return fail(VP_ERR_INVALID_ARGUMENT, std::string("malformed JSON: ") + e.what());
  } catch (const std::invalid_argument& e) {
    return fail(VP_ERR_INVALID_ARGUMENT, e.what());
  } catch (const std::out_of_range& e) {
    return fail(VP_ERR_OUT_OF_RANGE, e.what());
  } catch (const std::runtime_error& e) {
    return fail(VP_ERR_RUNTIME, e.what());
  } catch (const std::bad_alloc&) {
    return fail(VP_ERR_INTERNAL, "out of memory");
  } catch (const std::exception& e) {
    return fail(VP_ERR_INTERNAL, e.what());
  } catch (...) {
    return fail(VP_ERR_INTERNAL, "unknown error");
  }
}

void require(const void* p, const char* what) {
  if (!p) throw std::invalid_argument(std::string(what) + " is NULL");
}

char* dup_string(const std::string& s) {
  auto* out = static_cast<char*>(std::malloc(s.size() + 1));
  if (!out) throw std::bad_alloc();
  std::memcpy(out, s.data(), s.size() + 1);
  return out;
}

void put(char** out, const std::string& s) {
  if (out) *out = dup_string(s);
}

vp::Json parse(const char* json, const char* what) {
  require(json, what);
  return vp::Json::parse(json);
}

}  // namespace

extern "C" {

const char* vp_version(void) { return "0.1.0"; }

const char* vp_last_error(void) { return g_last_error.c_str(); }

const char* vp_status_name(vp_status status) {
  switch (status) {
    case VP_OK: return "ok";
    case VP_ERR_INVALID_ARGUMENT: return "invalid_argument";
    case VP_ERR_OUT_OF_RANGE: return "out_of_range";
    case VP_ERR_IO: return "io";
    case VP_ERR_NUMERIC: return "numeric";
    case VP_ERR_RUNTIME: return "runtime";
    case VP_ERR_INTERNAL: return "internal";
  }
  return "unknown";
}

void vp_string_free(char* s) { std::free(s); }

// ---------------------------------------------------------------------------
// Configs

vp_status vp_config_default(char** out_json) {
  return guarded([&] {
    require(out_json, "out_json");
    *out_json = dup_string(vp::dump_stable(vp::to_json(vp::ExperimentConfig::defaults())));
  });
}

vp_status vp_config_normalize(const char* json, char** out_json) {
  return guarded([&] {
    require(out_json, "out_json");
    const auto c = vp::experiment_from_json(parse(json, "json"));
    *out_json = dup_string(vp::dump_stable(vp::to_json(c)));
  });
}

vp_status vp_config_set(const char* json, const char* assignment, char** out_json) {
  return guarded([&] {
    require(assignment, "assignment");
    require(out_json, "out_json");
    auto doc = parse(json, "json");
    vp::apply_override(doc, assignment);
    *out_json = dup_string(vp::dump_stable(doc));
  });
}

vp_status vp_config_section(const char* config_json, const char* section, char** out_json) {
  return guarded([&] {
    require(section, "section");
    require(out_json, "out_json");
    const auto c = vp::experiment_from_json(parse(config_json, "config_json"));
    *out_json = dup_string(vp::dump_stable(vp::experiment_section(c, section)));
  });
}

vp_status vp_config_prune_job(const char* config_json, const char* criterion, double ratio, char** out_json) {
  return guarded([&] {
    require(criterion, "criterion");
    require(out_json, "out_json");
    const auto c = vp::experiment_from_json(parse(config_json, "config_json"));
    const auto job = vp::prune_job(c, vp::criterion_from_string(criterion), ratio);
    job.spec.validate();
    *out_json = dup_string(vp::dump_stable(vp::to_json(job)));
  });
}

vp_status vp_model_config_counts(const char* model_json, int64_t* params, int64_t* macs) {
  return guarded([&] {
    const auto c = vp::model_config_from_json(parse(model_json, "model_json"));
    if (params) *params = vp::param_count(c);
    if (macs) *macs = vp::macs_count(c);
  });
}

// ---------------------------------------------------------------------------
// Datasets

vp_status vp_dataset_from_config(const char* config_json, vp_dataset** out) {
  return guarded([&] {
    require(out, "out");
    const auto c = vp::experiment_from_json(parse(config_json, "config_json"));
    *out = new vp_dataset{vp::load_dataset(c)};
  });
}

vp_status vp_dataset_ingest(const char* root, int64_t image_size, int64_t channels, vp_dataset** out) {
  return guarded([&] {
    require(root, "root");
    require(out, "out");
    *out = new vp_dataset{vp::ingest_folder(root, image_size, channels)};
  });
}

vp_status vp_dataset_export(const vp_dataset* data, const char* root) {
  return guarded([&] {
    require(data, "data");
    require(root, "root");
    vp::export_folder(data->data, root);
  });
}

vp_status vp_dataset_summary(const vp_dataset* data, char** out_json) {
  return guarded([&] {
    require(data, "data");
    require(out_json, "out_json");
    *out_json = dup_string(vp::dump_stable(data->data.summary()));
  });
}

size_t vp_dataset_size(const vp_dataset* data) { return data ? data->data.size() : 0; }

vp_status vp_dataset_image(const vp_dataset* data, size_t index, double* out, size_t capacity, int* label) {
  return guarded([&] {
    require(data, "data");
    require(out, "out");
    if (index >= data->data.size()) throw std::out_of_range("sample index " + std::to_string(index) + " out of range");
    const std::size_t idx[] = {index};
    const auto t = data->data.images(idx);
    if (capacity < t.data().size()) throw std::invalid_argument("image buffer too small");
    std::copy(t.data().begin(), t.data().end(), out);
    if (label) *label = data->data.samples[index].label;
  });
}

void vp_dataset_free(vp_dataset* data) { delete data; }

vp_status vp_splits_make(const vp_dataset* data, const char* protocol_json, vp_splits** out) {
  return guarded([&] {
    require(data, "data");
    require(out, "out");
    const auto p = vp::split_protocol_from_json(parse(protocol_json, "protocol_json"));
    *out = new vp_splits{vp::make_splits(data->data, p)};
  });
}

vp_status vp_splits_to_json(const vp_splits* splits, char** out_json) {
  return guarded([&] {
    require(splits, "splits");
    require(out_json, "out_json");
    const auto& s = splits->splits;
    *out_json = dup_string(vp::dump_stable({{"train", s.train}, {"valid", s.valid}, {"test", s.test}}));
  });
}

void vp_splits_free(vp_splits* splits) { delete splits; }

// ---------------------------------------------------------------------------
// Models

vp_status vp_model_init(const char* model_json, uint64_t seed, vp_model** out) {
  return guarded([&] {
    require(out, "out");
    *out = new vp_model{vp::init_model(vp::model_config_from_json(parse(model_json, "model_json")), seed)};
  });
}

vp_status vp_model_load(const char* path, vp_model** out) {
  return guarded([&] {
    require(path, "path");
    require(out, "out");
    *out = new vp_model{vp::TransformerModel::load(path)};
  });
}

vp_status vp_model_save(const vp_model* model, const char* path) {
  return guarded([&] {
    require(model, "model");
    require(path, "path");
    model->model.save(path);
  });
}

vp_status vp_model_config(const vp_model* model, char** out_json) {
  return guarded([&] {
    require(model, "model");
    require(out_json, "out_json");
    *out_json = dup_string(vp::dump_stable(vp::Json(model->model.config())));
  });
}

vp_status vp_model_counts(const vp_model* model, int64_t* params, int64_t* macs) {
  return guarded([&] {
    require(model, "model");
    if (params) *params = vp::param_count(model->model);
    if (macs) *macs = vp::macs_count(model->model);
  });
}

vp_status vp_model_forward(const vp_model* model, const double* images, int64_t batch, double* logits,
                           size_t logits_capacity) {
  return guarded([&] {
    require(model, "model");
    require(images, "images");
    require(logits, "logits");
    const auto& c = model->model.config();
    if (batch < 1) throw std::invalid_argument("batch must be >= 1");
    if (logits_capacity < static_cast<size_t>(batch * c.num_classes)) {
      throw std::invalid_argument("logits buffer too small");
    }
    const vp::Shape shape{batch, c.channels, c.image_size, c.image_size};
    std::vector<double> d(images, images + vp::numel_of(shape));
    vp::NoGradGuard guard;
    const auto out = model->model.forward(vp::Tensor::from_data(shape, std::move(d)));
    std::copy(out.data().begin(), out.data().end(), logits);
  });
}

void vp_model_free(vp_model* model) { delete model; }

// ---------------------------------------------------------------------------
// Pipeline

vp_status vp_train(const vp_model* model, const vp_dataset* data, const vp_splits* splits, const char* phase,
                   const char* train_json, vp_model** out_best, char** out_result_json, char** out_curves_csv) {
  return guarded([&] {
    require(model, "model");
    require(data, "data");
    require(splits, "splits");
    require(phase, "phase");
    require(out_best, "out_best");
    const auto p = vp::phase_from_string(phase);
    const auto cfg = vp::train_config_from_json(parse(train_json, "train_json"), p);
    auto r = vp::train(model->model, data->data, splits->splits, cfg);
    const vp::Json result{{"phase", phase},
                          {"epochs_run", r.epochs_run},
                          {"best_epoch", r.best_epoch},
                          {"best_valid_loss", r.best_epoch > 0 ? vp::Json(r.best_valid_loss) : vp::Json(nullptr)},
                          {"early_stopped", r.early_stopped},
                          {"timing", {{"seconds", r.seconds}, {"finetune_time", vp::format_hms(r.seconds)}}}};
    put(out_result_json, vp::dump_stable(result));
    put(out_curves_csv, vp::curves_to_csv(r.curves));
    *out_best = new vp_model{std::move(r.best)};
  });
}

vp_status vp_prune(const vp_model* model, const vp_dataset* data, const vp_splits* splits, const char* job_json,
                   vp_model** out_pruned, char** out_report_json, char** out_scores_csv) {
  return guarded([&] {
    require(model, "model");
    require(data, "data");
    require(splits, "splits");
    require(out_pruned, "out_pruned");
    const auto job = vp::prune_job_from_json(parse(job_json, "job_json"));
    auto o = vp::prune_model(model->model, data->data, splits->splits, job);
    put(out_report_json, vp::dump_stable(o.report.to_json()));
    put(out_scores_csv, vp::scores_to_csv(o.scores));
    *out_pruned = new vp_model{std::move(o.model)};
  });
}

vp_status vp_evaluate(const vp_model* model, const vp_dataset* data, const vp_splits* splits,
                      double baseline_test_top1, double finetune_seconds, char** out_report_json) {
  return guarded([&] {
    require(model, "model");
    require(data, "data");
    require(splits, "splits");
    require(out_report_json, "out_report_json");
    std::optional<double> base;
    if (baseline_test_top1 >= 0) base = baseline_test_top1;
    auto r = vp::evaluate_report(model->model, data->data, splits->splits, base);
    if (finetune_seconds >= 0) r.finetune_seconds = finetune_seconds;
    *out_report_json = dup_string(vp::dump_stable(r.to_json()));
  });
}

vp_status vp_attention_distance(const vp_model* model, const vp_dataset* data, const vp_splits* splits,
                                int64_t max_images, char** out_csv, char** out_json) {
  return guarded([&] {
    require(model, "model");
    require(data, "data");
    require(splits, "splits");
    if (max_images < 1) throw std::invalid_argument("max_images must be >= 1");
    const auto& test = splits->splits.test;
    const std::span<const std::size_t> idx(test.data(), std::min<std::size_t>(test.size(), max_images));
    const auto t = vp::mean_attention_distance(model->model, data->data, idx);
    put(out_csv, t.to_csv());
    put(out_json, vp::dump_stable(t.to_json()));
  });
}

vp_status vp_attention_map(const vp_model* model, const vp_dataset* data, size_t index, int64_t layer,
                           const char* mode, const char* pgm_path, char** out_json) {
  return guarded([&] {
    require(model, "model");
    require(data, "data");
    require(mode, "mode");
    const auto m = vp::map_mode_from_string(mode);
    if (layer == -1) layer = model->model.config().num_layers - 1;
    const auto map = vp::attention_map(model->model, data->data, index, layer, m);
    if (pgm_path) vp::write_pgm(pgm_path, map.heatmap);
    vp::Json mask = vp::Json::array();
    for (auto v : map.mask) mask.push_back(static_cast<int>(v));
    put(out_json, vp::dump_stable({{"index", index},
                                   {"label", data->data.samples[index].label},
                                   {"layer", map.layer},
                                   {"mode", vp::to_string(map.mode)},
                                   {"grid", map.grid},
                                   {"saliency", map.saliency},
                                   {"mask", mask}}));
  });
}

}  // extern "C"
