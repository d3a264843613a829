#include <charconv>
#include <fstream>
#include <iomanip>
#include <sstream>

#include <nlohmann/json.hpp>

#include "fvlab/error.hpp"
#include "fvlab/harness.hpp"

namespace fvlab {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

std::string num(double v) {
  char buf[32];
  const auto res = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, res.ptr);
}

double parse_double(std::string_view s, const fs::path& path) {
  double v = 0.0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw ParseError(path.string() + ": bad number '" + std::string(s) + "'");
  }
  return v;
}

int parse_int(std::string_view s, const fs::path& path) {
  int v = 0;
  const auto res = std::from_chars(s.data(), s.data() + s.size(), v);
  if (res.ec != std::errc{} || res.ptr != s.data() + s.size()) {
    throw ParseError(path.string() + ": bad integer '" + std::string(s) + "'");
  }
  return v;
}

std::string hash_comment(const std::string& hash) { return "config_hash=" + hash; }

std::ofstream open_out(const fs::path& path) {
  std::ofstream out(path);
  if (!out) throw IoError("cannot write " + path.string());
  return out;
}

void close_out(std::ofstream& out, const fs::path& path) {
  out.flush();
  if (!out) throw IoError("write failed for " + path.string());
}

// Data rows of an emitted CSV, split on commas; comments and the header dropped.
std::vector<std::vector<std::string>> csv_rows(const fs::path& path, std::string_view header) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::vector<std::vector<std::string>> rows;
  std::string line;
  bool seen_header = false;
  while (std::getline(in, line)) {
    if (line.empty() || line[0] == '#') continue;
    if (!seen_header) {
      if (line != header) throw ParseError(path.string() + ": expected header '" + std::string(header) + "'");
      seen_header = true;
      continue;
    }
    std::vector<std::string> cells;
    std::stringstream ss(line);
    std::string cell;
    while (std::getline(ss, cell, ',')) cells.push_back(cell);
    rows.push_back(std::move(cells));
  }
  if (!seen_header) throw ParseError(path.string() + ": missing header");
  return rows;
}

void expect_cells(const std::vector<std::string>& row, std::size_t n, const fs::path& path) {
  if (row.size() != n) throw ParseError(path.string() + ": expected " + std::to_string(n) + " columns");
}

Accuracy acc_from(std::string_view value, std::string_view n, const fs::path& path) {
  return {parse_double(value, path), parse_int(n, path)};
}

json acc_json(const Accuracy& a) { return {{"accuracy", a.value}, {"n", a.n}, {"se", a.se()}}; }

std::string pct(const Accuracy& a) {
  std::ostringstream s;
  s << std::fixed << std::setprecision(1) << 100.0 * a.value << " +/- " << 100.0 * a.se();
  return s.str();
}

json results_json(const ResultsBundle& b) {
  json j;
  json meta;
  meta["config_hash"] = b.meta.config_hash;
  meta["dataset_key"] = b.meta.dataset_key;
  meta["backbone_key"] = b.meta.backbone_key;
  meta["backbone_checksum"] = b.meta.backbone_checksum;
  meta["seeds"] = b.meta.seeds;
  meta["injection_layer"] = b.meta.injection_layer;
  meta["precision"] = b.meta.precision;
  meta["started_at"] = b.meta.started_at;
  meta["warnings"] = b.meta.warnings;
  j["meta"] = meta;

  json rels = json::array();
  for (const auto& r : b.relations) {
    json heads = json::array();
    for (const auto& h : r.heads) heads.push_back({h.layer, h.head});
    rels.push_back({{"relation", relation_name(r.relation)},
                    {"baseline", acc_json(r.baseline)},
                    {"icl", acc_json(r.icl)},
                    {"initial_fv", acc_json(r.initial_fv)},
                    {"finetuned_fv", acc_json(r.finetuned_fv)},
                    {"heads", heads},
                    {"finetune_loss", r.finetune_loss}});
  }
  j["relations"] = rels;

  json layers = json::array();
  for (const auto& r : b.layer_sweep) {
    layers.push_back({{"relation", relation_name(r.relation)}, {"layer", r.layer}, {"accuracy", r.acc.value},
                      {"n", r.acc.n}});
  }
  j["layer_sweep"] = layers;

  json heads = json::array();
  for (const auto& r : b.head_sweep) {
    heads.push_back({{"relation", relation_name(r.relation)}, {"k", r.k}, {"accuracy", r.acc.value}, {"n", r.acc.n}});
  }
  j["head_sweep"] = heads;
  j["head_peak"] = b.head_peak;

  json ctx = json::array();
  for (const auto& r : b.context_sweep) {
    ctx.push_back({{"context_size", r.n},
                   {"relation", relation_name(r.relation)},
                   {"layer", r.layer},
                   {"accuracy", r.acc.value},
                   {"n", r.acc.n}});
  }
  j["context_sweep"] = ctx;

  json ana = json::array();
  for (const auto& r : b.analogy) ana.push_back({{"method", r.method}, {"accuracy", r.acc.value}, {"n", r.acc.n}});
  j["analogy"] = ana;
  return j;
}

void write_summary(const ResultsBundle& b, const fs::path& path) {
  auto out = open_out(path);
  out << "<!-- " << hash_comment(b.meta.config_hash) << " -->\n";
  out << "# fvlab results\n\n";
  out << "Injection layer " << b.meta.injection_layer << ", precision " << b.meta.precision << ", started "
      << b.meta.started_at << ".\n\n";
  if (!b.relations.empty()) {
    out << "## Zero-shot accuracy (%, +/- 1 SE)\n\n";
    out << "| relation | baseline | ICL | initial FV | fine-tuned FV |\n";
    out << "|---|---|---|---|---|\n";
    for (const auto& r : b.relations) {
      out << "| " << relation_name(r.relation) << " | " << pct(r.baseline) << " | " << pct(r.icl) << " | "
          << pct(r.initial_fv) << " | " << pct(r.finetuned_fv) << " |\n";
    }
    out << '\n';
  }
  if (!b.analogy.empty()) {
    out << "## Analogy accuracy (%, +/- 1 SE)\n\n| method | accuracy |\n|---|---|\n";
    for (const auto& r : b.analogy) out << "| " << r.method << " | " << pct(r.acc) << " |\n";
    out << '\n';
  }
  if (!b.head_peak.empty()) {
    out << "## Best head count\n\n| relation | k |\n|---|---|\n";
    for (const auto& [rel, k] : b.head_peak) out << "| " << rel << " | " << k << " |\n";
    out << '\n';
  }
  if (!b.meta.warnings.empty()) {
    out << "## Warnings\n\n";
    for (const auto& w : b.meta.warnings) out << "- " << w << '\n';
  }
  close_out(out, path);
}

}  // namespace

void write_layer_sweep_csv(std::span<const LayerSweepRow> rows, const fs::path& path, const std::string& hash) {
  auto out = open_out(path);
  out << "# " << hash_comment(hash) << "\nrelation,layer,accuracy,n\n";
  for (const auto& r : rows) {
    out << relation_name(r.relation) << ',' << r.layer << ',' << num(r.acc.value) << ',' << r.acc.n << '\n';
  }
  close_out(out, path);
}

void write_head_sweep_csv(std::span<const HeadSweepRow> rows, const fs::path& path, const std::string& hash) {
  auto out = open_out(path);
  out << "# " << hash_comment(hash) << "\nrelation,k,accuracy,n\n";
  for (const auto& r : rows) {
    out << relation_name(r.relation) << ',' << r.k << ',' << num(r.acc.value) << ',' << r.acc.n << '\n';
  }
  close_out(out, path);
}

void write_context_sweep_csv(std::span<const ContextSweepRow> rows, const fs::path& path, const std::string& hash) {
  auto out = open_out(path);
  out << "# " << hash_comment(hash) << "\ncontext_size,relation,layer,accuracy,n\n";
  for (const auto& r : rows) {
    out << r.n << ',' << relation_name(r.relation) << ',' << r.layer << ',' << num(r.acc.value) << ',' << r.acc.n
        << '\n';
  }
  close_out(out, path);
}

void write_analogy_csv(std::span<const AnalogyRow> rows, const fs::path& path, const std::string& hash) {
  auto out = open_out(path);
  out << "# " << hash_comment(hash) << "\nmethod,accuracy,n\n";
  for (const auto& r : rows) out << r.method << ',' << num(r.acc.value) << ',' << r.acc.n << '\n';
  close_out(out, path);
}

void emit_reports(const ResultsBundle& b, const fs::path& dir) {
  fs::create_directories(dir);
  {
    const fs::path p = dir / "results.json";
    auto out = open_out(p);
    out << results_json(b).dump(2) << '\n';
    close_out(out, p);
  }
  for (const auto& a : b.aie) {
    const std::string rel(relation_name(a.relation));
    write_aie_csv(a, dir / ("aie_" + rel + ".csv"), hash_comment(b.meta.config_hash));
    const fs::path side = dir / ("aie_" + rel + ".json");
    auto out = open_out(side);
    out << json{{"config_hash", b.meta.config_hash},
                {"relation", rel},
                {"n_layers", a.grid.rows()},
                {"n_heads", a.grid.cols()},
                {"perturbed_prompt_count", a.perturbed_prompt_count},
                {"seeds", b.meta.seeds}}
               .dump(2)
        << '\n';
    close_out(out, side);
  }
  if (!b.layer_sweep.empty()) write_layer_sweep_csv(b.layer_sweep, dir / "sweep_layers.csv", b.meta.config_hash);
  if (!b.head_sweep.empty()) write_head_sweep_csv(b.head_sweep, dir / "sweep_heads.csv", b.meta.config_hash);
  std::map<int, std::vector<ContextSweepRow>> by_n;
  for (const auto& r : b.context_sweep) by_n[r.n].push_back(r);
  for (const auto& [n, rows] : by_n) {
    write_context_sweep_csv(rows, dir / ("sweep_context_n" + std::to_string(n) + ".csv"), b.meta.config_hash);
  }
  if (!b.analogy.empty()) write_analogy_csv(b.analogy, dir / "analogy.csv", b.meta.config_hash);
  write_summary(b, dir / "summary.md");
}

std::vector<LayerSweepRow> read_layer_sweep_csv(const fs::path& path) {
  std::vector<LayerSweepRow> out;
  for (const auto& row : csv_rows(path, "relation,layer,accuracy,n")) {
    expect_cells(row, 4, path);
    out.push_back({relation_from_name(row[0]), parse_int(row[1], path), acc_from(row[2], row[3], path)});
  }
  return out;
}

std::vector<HeadSweepRow> read_head_sweep_csv(const fs::path& path) {
  std::vector<HeadSweepRow> out;
  for (const auto& row : csv_rows(path, "relation,k,accuracy,n")) {
    expect_cells(row, 4, path);
    out.push_back({relation_from_name(row[0]), parse_int(row[1], path), acc_from(row[2], row[3], path)});
  }
  return out;
}

std::vector<ContextSweepRow> read_context_sweep_csv(const fs::path& path) {
  std::vector<ContextSweepRow> out;
  for (const auto& row : csv_rows(path, "context_size,relation,layer,accuracy,n")) {
    expect_cells(row, 5, path);
    out.push_back({parse_int(row[0], path), relation_from_name(row[1]), parse_int(row[2], path),
                   acc_from(row[3], row[4], path)});
  }
  return out;
}

std::vector<AnalogyRow> read_analogy_csv(const fs::path& path) {
  std::vector<AnalogyRow> out;
  for (const auto& row : csv_rows(path, "method,accuracy,n")) {
    expect_cells(row, 3, path);
    out.push_back({row[0], acc_from(row[1], row[2], path)});
  }
  return out;
}

std::string read_config_hash(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot read " + path.string());
  std::string line;
  const std::string key = "config_hash=";
  while (std::getline(in, line)) {
    if (const auto at = line.find(key); at != std::string::npos) {
      std::string rest = line.substr(at + key.size());
      const auto end = rest.find_first_of(" \t-\"");
      return end == std::string::npos ? rest : rest.substr(0, end);
    }
    if (!line.empty() && line[0] != '#' && line.rfind("<!--", 0) != 0) break;
  }
  throw ParseError(path.string() + ": no config_hash header");
}

}  // namespace fvlab
