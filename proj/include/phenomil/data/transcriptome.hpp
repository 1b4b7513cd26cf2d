#pragma once

#include <cmath>
#include <fstream>
#include <map>
#include <string>
#include <vector>

#include <fmt/format.h>

#include "phenomil/core/error.hpp"
#include "phenomil/knowledge/kb.hpp"

namespace phenomil {

/// RNA-Seq abundance for one sample: gene symbol -> non-negative value.
struct TranscriptomeProfile {
  std::string sample_id;
  std::map<std::string, double> expression;

  bool operator==(const TranscriptomeProfile&) const = default;
};

inline void validate_profile(const TranscriptomeProfile& p) {
  for (const auto& [gene, v] : p.expression) {
    if (!std::isfinite(v) || v < 0.0) {
      throw ValidationError("profile '" + p.sample_id + "': gene '" + gene + "' has invalid abundance " + std::to_string(v));
    }
  }
}

inline void write_profile(const TranscriptomeProfile& p, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write profile '" + path + "'");
  out << "sample_id=" << p.sample_id << "\n";
  for (const auto& [gene, v] : p.expression) out << gene << '\t' << fmt::format("{:.17g}", v) << '\n';
}

inline TranscriptomeProfile read_profile(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open profile '" + path + "'");
  TranscriptomeProfile p;
  std::string line;
  std::size_t lineno = 1;
  if (!std::getline(in, line) || line.rfind("sample_id=", 0) != 0) {
    throw ParseError("expected header 'sample_id=<string>'", lineno);
  }
  p.sample_id = line.substr(10);
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) throw ParseError("expected 'gene\\tvalue'", lineno);
    try {
      p.expression[line.substr(0, tab)] = std::stod(line.substr(tab + 1));
    } catch (const std::exception&) {
      throw ParseError("bad abundance value", lineno);
    }
  }
  validate_profile(p);
  return p;
}

/// Expression split by phenotype gene set, in KB gene order. Genes absent
/// from the profile are zero-filled and counted in `missing`.
struct GenePartition {
  std::vector<std::vector<double>> groups;
  std::size_t missing = 0;
  std::vector<std::string> missing_genes;
};

inline GenePartition partition_genes(const TranscriptomeProfile& profile, const PhenotypeKB& kb) {
  GenePartition out;
  out.groups.reserve(kb.size());
  for (const auto& ph : kb.phenotypes) {
    std::vector<double> group;
    group.reserve(ph.genes.size());
    for (const auto& g : ph.genes) {
      const auto it = profile.expression.find(g);
      if (it == profile.expression.end()) {
        group.push_back(0.0);
        ++out.missing;
        out.missing_genes.push_back(g);
      } else {
        group.push_back(it->second);
      }
    }
    out.groups.push_back(std::move(group));
  }
  return out;
}

}  // namespace phenomil
