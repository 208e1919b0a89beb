#include <pybind11/pybind11.h>
#include <pybind11/stl.h>
#include <pybind11/stl/filesystem.h>

#include <json.hpp>
#include <sstream>

#include "cli.hpp"
#include "mtlforge/corpus.hpp"
#include "mtlforge/error.hpp"
#include "mtlforge/metrics.hpp"
#include "mtlforge/model.hpp"
#include "mtlforge/numerics/rng.hpp"
#include "mtlforge/textnorm.hpp"
#include "mtlforge/tokenizer.hpp"
#include "mtlforge/training.hpp"

namespace py = pybind11;
using namespace mtlforge;

namespace {

py::object json_to_py(const std::string& text) {
  return py::module_::import("json").attr("loads")(text);
}

py::dict eval_dict(const metrics::EvalResult& r) {
  py::list per_class;
  for (std::size_t i = 0; i < r.labels.size(); ++i) {
    const auto& c = r.per_class[i];
    py::dict d;
    d["label"] = r.labels[i];
    d["precision"] = c.precision;
    d["recall"] = c.recall;
    d["f1"] = c.f1;
    d["support"] = c.support;
    per_class.append(d);
  }
  py::dict out;
  out["macro_f1"] = r.macro_f1;
  out["labels"] = r.labels;
  out["per_class"] = per_class;
  out["confusion"] = r.confusion;
  out["n"] = r.n;
  return out;
}

py::dict train_dict(training::TrainResult&& r) {
  py::dict out;
  out["model"] = std::move(r.best);
  out["report"] = json_to_py(r.report.to_json());
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Multi-task sexism detection toolkit: preprocessing, tokenization, a small transformer encoder, "
            "MLM pre-training, multi-task training and evaluation.";
  m.attr("__version__") = MTLFORGE_VERSION;
  m.attr("_source_data_dir") = MTLFORGE_SOURCE_DATA_DIR;

  static py::exception<Error> base(m, "Error");
  py::register_exception<DimensionError>(m, "DimensionError", base.ptr());
  py::register_exception<NumericError>(m, "NumericError", base.ptr());
  py::register_exception<ContractError>(m, "ContractError", base.ptr());
  py::register_exception<ConfigError>(m, "ConfigError", base.ptr());
  py::register_exception<SchemaError>(m, "SchemaError", base.ptr());
  py::register_exception<LookupError>(m, "LookupError", base.ptr());
  py::register_exception<CheckpointError>(m, "CheckpointError", base.ptr());
  py::register_exception<RangeError>(m, "RangeError", base.ptr());
  py::register_exception<IoError>(m, "IoError", base.ptr());

  // text normalization
  py::class_<textnorm::NormConfig>(m, "NormConfig")
      .def(py::init([](bool masks, bool emoji, bool hashtags, std::string user_token, std::string url_token) {
             textnorm::NormConfig c{masks, emoji, hashtags, std::move(user_token), std::move(url_token)};
             c.validate();
             return c;
           }),
           py::arg("masks") = true, py::arg("emoji") = true, py::arg("hashtags") = false,
           py::arg("user_token") = "[USER]", py::arg("url_token") = "[URL]")
      .def_readwrite("masks", &textnorm::NormConfig::masks)
      .def_readwrite("emoji", &textnorm::NormConfig::emoji)
      .def_readwrite("hashtags", &textnorm::NormConfig::hashtags)
      .def_readwrite("user_token", &textnorm::NormConfig::user_token)
      .def_readwrite("url_token", &textnorm::NormConfig::url_token);

  py::class_<textnorm::Lexicon>(m, "Lexicon")
      .def_static("load", &textnorm::Lexicon::load, py::arg("path"))
      .def_static("from_counts", &textnorm::Lexicon::from_counts, py::arg("counts"));

  py::class_<textnorm::EmojiTable>(m, "EmojiTable")
      .def_static("load", &textnorm::EmojiTable::load, py::arg("path"))
      .def_static("from_entries", &textnorm::EmojiTable::from_entries, py::arg("entries"));

  py::class_<textnorm::Preprocessor>(m, "Preprocessor")
      .def(py::init<textnorm::NormConfig, textnorm::Lexicon, textnorm::EmojiTable>(), py::arg("config"),
           py::arg("lexicon"), py::arg("emoji_table"))
      .def("__call__", &textnorm::Preprocessor::operator(), py::arg("text"));

  m.def("normalize_masks", &textnorm::normalize_masks, py::arg("text"), py::arg("config") = textnorm::NormConfig{});
  m.def("segment_word", &textnorm::segment_word, py::arg("body"), py::arg("lexicon"));
  m.def("segment_hashtags", &textnorm::segment_hashtags, py::arg("text"), py::arg("lexicon"));
  m.def("emojis_to_text", &textnorm::emojis_to_text, py::arg("text"), py::arg("table"));

  // tokenization
  m.def("tokenize", &tokenizer::tokenize, py::arg("text"));
  py::class_<tokenizer::Vocab>(m, "Vocab")
      .def_static("build", [](const std::vector<std::string>& texts, std::size_t min_freq) {
        return tokenizer::Vocab::build(texts, min_freq);
      }, py::arg("texts"), py::arg("min_freq") = 1)
      .def_static("load", &tokenizer::Vocab::load, py::arg("path"))
      .def("save", &tokenizer::Vocab::save, py::arg("path"))
      .def("__len__", &tokenizer::Vocab::size)
      .def("token", &tokenizer::Vocab::token, py::arg("id"))
      .def("id", &tokenizer::Vocab::id_or_unk, py::arg("token"))
      .def("encode", [](const tokenizer::Vocab& v, const std::string& text, std::size_t max_len) {
        auto e = tokenizer::encode(text, v, max_len);
        return py::make_tuple(e.ids, e.mask);
      }, py::arg("text"), py::arg("max_len"));

  // metrics and training utilities
  m.def("macro_f1", [](const std::vector<std::string>& preds, const std::vector<std::string>& golds,
                       const std::vector<std::string>& labels) {
    return eval_dict(metrics::macro_f1(preds, golds, labels));
  }, py::arg("preds"), py::arg("golds"), py::arg("labels"));
  m.def("macro_f1_indices", [](const std::vector<std::size_t>& preds, const std::vector<std::size_t>& golds,
                               const std::vector<std::string>& labels) {
    return eval_dict(metrics::macro_f1(preds, golds, labels));
  }, py::arg("preds"), py::arg("golds"), py::arg("labels"));

  m.def("check_convergence", [](const std::vector<double>& losses, std::size_t patience) {
    return training::check_convergence(losses, patience);
  }, py::arg("val_losses"), py::arg("patience") = 5);

  m.def("mask_tokens", [](const std::vector<std::int64_t>& ids, const std::vector<std::int64_t>& mask,
                          std::size_t vocab_size, double mask_prob, std::uint64_t seed) {
    numerics::Rng rng(seed);
    training::MaskStats st;
    auto r = training::mask_tokens(ids, mask, vocab_size, mask_prob, {}, rng, &st);
    py::dict stats;
    stats["eligible"] = st.eligible;
    stats["selected"] = st.selected;
    stats["masked"] = st.masked;
    stats["randomized"] = st.randomized;
    stats["kept"] = st.kept;
    return py::make_tuple(r.input_ids, r.labels, stats);
  }, py::arg("ids"), py::arg("mask"), py::arg("vocab_size"), py::arg("mask_prob") = 0.15, py::arg("seed") = 0);

  m.def("build_mtl_schedule", [](const std::vector<std::size_t>& sizes, std::size_t batch_size, std::uint64_t seed) {
    numerics::Rng rng(seed);
    std::vector<std::pair<std::size_t, std::vector<std::size_t>>> out;
    for (auto& b : training::build_mtl_schedule(sizes, batch_size, rng)) out.emplace_back(b.task, std::move(b.examples));
    return out;
  }, py::arg("task_sizes"), py::arg("batch_size"), py::arg("seed") = 0);

  // tasks
  py::class_<corpus::TaskDataset>(m, "TaskDataset")
      .def(py::init([](std::string name, std::vector<std::string> labels, std::vector<std::string> texts,
                       std::vector<std::string> gold, double loss_weight) {
             if (texts.size() != gold.size()) throw ContractError("texts and labels differ in length");
             corpus::TaskDataset d{std::move(name), std::move(labels), loss_weight, {}, {}};
             for (std::size_t i = 0; i < texts.size(); ++i) {
               d.examples.push_back({d.name + ":" + std::to_string(i), texts[i], gold[i]});
             }
             d.validate();
             return d;
           }),
           py::arg("name"), py::arg("label_set"), py::arg("texts"), py::arg("labels"), py::arg("loss_weight") = 1.0)
      .def_readonly("name", &corpus::TaskDataset::name)
      .def_readonly("label_set", &corpus::TaskDataset::label_set)
      .def_readwrite("loss_weight", &corpus::TaskDataset::loss_weight)
      .def_property_readonly("texts", &corpus::TaskDataset::texts)
      .def_property_readonly("labels", [](const corpus::TaskDataset& d) {
        std::vector<std::string> v;
        for (const auto& e : d.examples) v.push_back(e.label);
        return v;
      })
      .def("__len__", [](const corpus::TaskDataset& d) { return d.examples.size(); })
      .def("split", [](const corpus::TaskDataset& d, double ratio, std::uint64_t seed, bool stratified) {
        return corpus::split_train_eval(d, {ratio, seed, stratified});
      }, py::arg("ratio") = 0.8, py::arg("seed") = 0, py::arg("stratified") = true);

  // model
  py::class_<model::EncoderConfig>(m, "EncoderConfig")
      .def(py::init([](std::size_t vocab_size, std::size_t d_model, std::size_t n_heads, std::size_t n_layers,
                       std::size_t d_ff, std::size_t max_len, double dropout) {
             model::EncoderConfig c{vocab_size, d_model, n_heads, n_layers, d_ff, max_len, dropout};
             c.validate();
             return c;
           }),
           py::arg("vocab_size"), py::arg("d_model") = 32, py::arg("n_heads") = 2, py::arg("n_layers") = 2,
           py::arg("d_ff") = 64, py::arg("max_len") = 32, py::arg("dropout") = 0.1)
      .def_readonly("vocab_size", &model::EncoderConfig::vocab_size)
      .def_readonly("d_model", &model::EncoderConfig::d_model)
      .def_readonly("n_heads", &model::EncoderConfig::n_heads)
      .def_readonly("n_layers", &model::EncoderConfig::n_layers)
      .def_readonly("d_ff", &model::EncoderConfig::d_ff)
      .def_readonly("max_len", &model::EncoderConfig::max_len)
      .def_readonly("dropout", &model::EncoderConfig::dropout);

  m.def("expected_parameter_count", &model::expected_parameter_count, py::arg("config"),
        py::arg("heads") = model::HeadSpec{});

  py::class_<model::ModelBundle>(m, "Model")
      .def_static("create", &model::ModelBundle::create, py::arg("config"), py::arg("seed") = 0)
      .def_static("load", [](const std::filesystem::path& p) { return model::load_checkpoint(p); }, py::arg("path"))
      .def("save", [](const model::ModelBundle& b, const std::filesystem::path& p) { model::save_checkpoint(b, p); },
           py::arg("path"))
      .def_property_readonly("config", &model::ModelBundle::config)
      .def_property_readonly("heads", &model::ModelBundle::heads)
      .def("add_head", &model::ModelBundle::add_head, py::arg("task"), py::arg("labels"), py::arg("seed") = 0)
      .def("remove_head", &model::ModelBundle::remove_head, py::arg("task"))
      .def("parameter_count", &model::ModelBundle::parameter_count)
      .def("parameter_names", [](const model::ModelBundle& b) {
        std::vector<std::string> names;
        for (const auto& [name, t] : b.params()) names.push_back(name);
        return names;
      })
      .def("parameter", [](const model::ModelBundle& b, const std::string& name) {
        const auto& t = b.param(name);
        return py::make_tuple(t.shape(), std::vector<double>(t.data().begin(), t.data().end()));
      }, py::arg("name"))
      .def("clone", &model::ModelBundle::clone)
      .def("predict", [](const model::ModelBundle& b, const std::string& task, const std::vector<std::string>& texts,
                         const tokenizer::Vocab& vocab) {
        std::vector<std::string> out;
        const auto& labels = b.heads().at(task);
        for (auto i : training::predict(b, task, texts, vocab)) out.push_back(labels[i]);
        return out;
      }, py::arg("task"), py::arg("texts"), py::arg("vocab"), py::call_guard<py::gil_scoped_release>());

  m.def("pretrain_mlm", [](const model::ModelBundle& b, const std::vector<std::string>& texts,
                           const tokenizer::Vocab& vocab, double lr, std::size_t max_epochs, std::size_t batch_size,
                           double mask_prob, std::size_t patience, double val_fraction, std::uint64_t seed) {
    training::PretrainConfig cfg;
    cfg.lr = lr;
    cfg.max_epochs = max_epochs;
    cfg.batch_size = batch_size;
    cfg.mask_prob = mask_prob;
    cfg.patience = patience;
    cfg.val_fraction = val_fraction;
    cfg.seed = seed;
    training::PretrainResult r = [&] {
      py::gil_scoped_release release;
      return training::pretrain_mlm(b, texts, vocab, cfg);
    }();
    py::dict out;
    out["model"] = std::move(r.best);
    out["initial_val_loss"] = r.initial_val_loss;
    out["best_val_loss"] = r.best_val_loss;
    out["converged"] = r.converged;
    out["steps"] = r.steps;
    out["curve_csv"] = r.curve_csv();
    return out;
  }, py::arg("model"), py::arg("texts"), py::arg("vocab"), py::arg("lr") = 5e-6, py::arg("max_epochs") = 10,
     py::arg("batch_size") = 32, py::arg("mask_prob") = 0.15, py::arg("patience") = 5, py::arg("val_fraction") = 0.05,
     py::arg("seed") = 0);

  auto mtl_config = [](double lr, std::size_t epochs, std::size_t batch_size, double dev_fraction,
                       std::optional<double> target, std::uint64_t seed) {
    training::MtlConfig cfg;
    cfg.lr = lr;
    cfg.ft_lr = lr;
    cfg.epochs = epochs;
    cfg.ft_epochs = epochs;
    cfg.batch_size = batch_size;
    cfg.dev_fraction = dev_fraction;
    cfg.target_aggregate = target;
    cfg.seed = seed;
    return cfg;
  };
  m.def("train_mtl", [mtl_config](const model::ModelBundle& b, const std::vector<corpus::TaskDataset>& tasks,
                                  const tokenizer::Vocab& vocab, double lr, std::size_t epochs, std::size_t batch_size,
                                  double dev_fraction, std::optional<double> target_aggregate, std::uint64_t seed) {
    const auto cfg = mtl_config(lr, epochs, batch_size, dev_fraction, target_aggregate, seed);
    auto r = [&] {
      py::gil_scoped_release release;
      return training::train_mtl(b, tasks, vocab, cfg);
    }();
    return train_dict(std::move(r));
  }, py::arg("model"), py::arg("tasks"), py::arg("vocab"), py::arg("lr") = 5e-6, py::arg("epochs") = 20,
     py::arg("batch_size") = 4, py::arg("dev_fraction") = 0.1, py::arg("target_aggregate") = py::none(),
     py::arg("seed") = 0);
  m.def("finetune", [mtl_config](const model::ModelBundle& b, const corpus::TaskDataset& task,
                                 const tokenizer::Vocab& vocab, double lr, std::size_t epochs, std::size_t batch_size,
                                 double dev_fraction, std::uint64_t seed) {
    const auto cfg = mtl_config(lr, epochs, batch_size, dev_fraction, std::nullopt, seed);
    auto r = [&] {
      py::gil_scoped_release release;
      return training::finetune(b, task, vocab, cfg);
    }();
    return train_dict(std::move(r));
  }, py::arg("model"), py::arg("task"), py::arg("vocab"), py::arg("lr") = 1e-6, py::arg("epochs") = 10,
     py::arg("batch_size") = 4, py::arg("dev_fraction") = 0.1, py::arg("seed") = 0);
  m.def("evaluate", [](const model::ModelBundle& b, const corpus::TaskDataset& d, const tokenizer::Vocab& vocab) {
    return eval_dict(training::evaluate(b, d, vocab));
  }, py::arg("model"), py::arg("task"), py::arg("vocab"));

  m.def("run_cli", [](const std::vector<std::string>& args) {
    std::ostringstream out, err;
    int code;
    {
      py::gil_scoped_release release;
      code = cli::run(args, out, err);
    }
    return py::make_tuple(code, out.str(), err.str());
  }, py::arg("args"));
}
