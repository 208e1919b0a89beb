#include "mtlforge/metrics.hpp"

#include <algorithm>
#include <cstdio>
#include <unordered_map>

#include <json.hpp>

#include "mtlforge/error.hpp"

namespace mtlforge::metrics {

namespace {

double ratio(std::size_t num, std::size_t den) {
  return den == 0 ? 0.0 : static_cast<double>(num) / static_cast<double>(den);
}

std::string fixed4(double v) {
  char buf[32];
  std::snprintf(buf, sizeof buf, "%.4f", v);
  return buf;
}

}  // namespace

EvalResult macro_f1(std::span<const std::size_t> preds, std::span<const std::size_t> golds,
                    const std::vector<std::string>& label_set) {
  if (preds.size() != golds.size()) {
    throw ContractError("macro_f1: " + std::to_string(preds.size()) + " predictions for " +
                        std::to_string(golds.size()) + " gold labels");
  }
  if (preds.empty()) throw ContractError("macro_f1: no examples");
  if (label_set.empty()) throw ContractError("macro_f1: empty label set");
  const std::size_t k = label_set.size();
  EvalResult r;
  r.labels = label_set;
  r.n = preds.size();
  r.confusion.assign(k, std::vector<std::size_t>(k, 0));
  for (std::size_t i = 0; i < preds.size(); ++i) {
    if (preds[i] >= k || golds[i] >= k) {
      throw ContractError("macro_f1: label index outside the declared label set at position " + std::to_string(i));
    }
    ++r.confusion[golds[i]][preds[i]];
  }
  r.per_class.resize(k);
  double total = 0.0;
  for (std::size_t c = 0; c < k; ++c) {
    std::size_t tp = r.confusion[c][c], gold_c = 0, pred_c = 0;
    for (std::size_t j = 0; j < k; ++j) {
      gold_c += r.confusion[c][j];
      pred_c += r.confusion[j][c];
    }
    auto& s = r.per_class[c];
    s.support = gold_c;
    s.precision = ratio(tp, pred_c);
    s.recall = ratio(tp, gold_c);
    s.f1 = (s.precision + s.recall) == 0.0 ? 0.0 : 2.0 * s.precision * s.recall / (s.precision + s.recall);
    total += s.f1;
  }
  r.macro_f1 = total / static_cast<double>(k);
  return r;
}

EvalResult macro_f1(std::span<const std::string> preds, std::span<const std::string> golds,
                    const std::vector<std::string>& label_set) {
  std::unordered_map<std::string, std::size_t> index;
  for (std::size_t i = 0; i < label_set.size(); ++i) {
    if (!index.emplace(label_set[i], i).second) throw ContractError("macro_f1: duplicate label '" + label_set[i] + "'");
  }
  auto to_index = [&](std::span<const std::string> labels) {
    std::vector<std::size_t> out;
    out.reserve(labels.size());
    for (const auto& l : labels) {
      auto it = index.find(l);
      if (it == index.end()) throw ContractError("macro_f1: label '" + l + "' is not in the label set");
      out.push_back(it->second);
    }
    return out;
  };
  const auto p = to_index(preds);
  const auto g = to_index(golds);
  return macro_f1(std::span<const std::size_t>(p), std::span<const std::size_t>(g), label_set);
}

std::string to_json(const EvalResult& r) {
  nlohmann::ordered_json j;
  j["macro_f1"] = r.macro_f1;
  j["n"] = r.n;
  j["labels"] = r.labels;
  auto& per = j["per_class"];
  per = nlohmann::ordered_json::object();
  for (std::size_t c = 0; c < r.labels.size(); ++c) {
    per[r.labels[c]] = {{"precision", r.per_class[c].precision},
                        {"recall", r.per_class[c].recall},
                        {"f1", r.per_class[c].f1},
                        {"support", r.per_class[c].support}};
  }
  j["confusion"] = r.confusion;
  return j.dump(2);
}

std::string confusion_csv(const EvalResult& r) {
  std::string out = "gold\\pred";
  for (const auto& l : r.labels) out += "," + l;
  out += "\n";
  for (std::size_t g = 0; g < r.labels.size(); ++g) {
    out += r.labels[g];
    for (std::size_t p = 0; p < r.labels.size(); ++p) out += "," + std::to_string(r.confusion[g][p]);
    out += "\n";
  }
  return out;
}

std::string compare_runs(const std::vector<RunScores>& results, const std::vector<RunScores>& baselines) {
  std::vector<const RunScores*> rows;
  for (const auto& b : baselines) rows.push_back(&b);
  for (const auto& r : results) rows.push_back(&r);
  if (rows.empty()) throw ContractError("compare_runs: no rows");

  const auto& axes = rows.front()->cells;
  if (axes.empty()) throw ContractError("compare_runs: rows carry no scores");
  for (const auto* row : rows) {
    bool same = row->cells.size() == axes.size();
    for (std::size_t c = 0; same && c < axes.size(); ++c) {
      same = row->cells[c].task == axes[c].task && row->cells[c].set == axes[c].set;
    }
    if (!same) throw ContractError("compare_runs: row '" + row->name + "' has different task/set columns");
  }

  std::vector<std::string> best(axes.size());
  for (std::size_t c = 0; c < axes.size(); ++c) {
    double mx = rows.front()->cells[c].value;
    for (const auto* row : rows) mx = std::max(mx, row->cells[c].value);
    best[c] = fixed4(mx);
  }

  std::string out = "| Dataset |";
  for (const auto& cell : axes) out += " " + cell.task + " " + cell.set + " |";
  out += "\n|---|";
  for (std::size_t c = 0; c < axes.size(); ++c) out += "---:|";
  out += "\n";
  for (const auto* row : rows) {
    out += "| " + row->name + " |";
    for (std::size_t c = 0; c < axes.size(); ++c) {
      const std::string v = fixed4(row->cells[c].value);
      out += v == best[c] ? " **" + v + "** |" : " " + v + " |";
    }
    out += "\n";
  }
  return out;
}

}  // namespace mtlforge::metrics
