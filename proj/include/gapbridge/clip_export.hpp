#pragma once

// Exporter interfaces: turn captions or images into EMB1 files through a
// pluggable encoder, and pull captions plus a noun lexicon out of a COCO-style
// annotation file. No encoder backend ships with the library; callers supply
// one by implementing TextEncoder or ImageEncoder.

#include <algorithm>
#include <cctype>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "gapbridge/emb_io.hpp"
#include "gapbridge/errors.hpp"
#include "gapbridge/log.hpp"

namespace gapbridge {

struct ExportJob {
  std::string model_id;
  std::filesystem::path input;
  std::filesystem::path output;
  bool normalize = true;
  long batch = 64;

  void validate() const {
    if (model_id.empty()) throw ValidationError("export job needs a model id");
    if (batch < 1) throw ValidationError("export batch must be positive");
  }
};

/// Raised by an ImageEncoder for a file it cannot decode; the exporter skips it.
class DecodeError : public IoError {
 public:
  using IoError::IoError;
};

class TextEncoder {
 public:
  virtual ~TextEncoder() = default;
  virtual Eigen::Index width() const = 0;
  /// One row per caption.
  virtual Mat encode(const std::vector<std::string>& captions) = 0;
};

class ImageEncoder {
 public:
  virtual ~ImageEncoder() = default;
  virtual Eigen::Index width() const = 0;
  /// One row; throws DecodeError for an unreadable image.
  virtual Vec encode(const std::filesystem::path& image) = 0;
};

namespace detail {

inline EmbeddingMatrix finish_export(const Mat& rows, std::vector<std::string> ids, const ExportJob& job) {
  auto m = EmbeddingMatrix::from_matrix(rows, false, std::move(ids));
  if (job.normalize) m = l2_normalize(m);
  write_embeddings(m, job.output);
  return m;
}

inline void check_width(const Mat& rows, Eigen::Index expected, Eigen::Index count) {
  if (rows.rows() != count || rows.cols() != expected)
    throw ShapeError("encoder returned " + std::to_string(rows.rows()) + "x" + std::to_string(rows.cols()) +
                     ", expected " + std::to_string(count) + "x" + std::to_string(expected));
}

}  // namespace detail

/// Row i embeds line i of the caption file; ids are 1-based line numbers.
inline EmbeddingMatrix export_text_embeddings(const ExportJob& job, TextEncoder& encoder) {
  job.validate();
  std::ifstream in(job.input);
  if (!in) throw IoError("cannot open captions " + job.input.string());
  std::vector<std::string> lines;
  for (std::string line; std::getline(in, line);) {
    if (!line.empty() && line.back() == '\r') line.pop_back();
    lines.push_back(std::move(line));
  }
  if (lines.empty()) throw InsufficientDataError("caption file " + job.input.string() + " is empty");
  const auto n = static_cast<Eigen::Index>(lines.size());
  Mat rows(n, encoder.width());
  for (Eigen::Index start = 0; start < n; start += job.batch) {
    const Eigen::Index len = std::min<Eigen::Index>(job.batch, n - start);
    const std::vector<std::string> chunk(lines.begin() + start, lines.begin() + start + len);
    const Mat enc = encoder.encode(chunk);
    detail::check_width(enc, encoder.width(), len);
    rows.middleRows(start, len) = enc;
  }
  std::vector<std::string> ids;
  for (Eigen::Index i = 0; i < n; ++i) ids.push_back(std::to_string(i + 1));
  return detail::finish_export(rows, std::move(ids), job);
}

/// Rows follow lexicographic filename order; ids are the filenames. Files the
/// encoder cannot decode are skipped and listed in `<output>.skipped.txt`.
inline EmbeddingMatrix export_image_embeddings(const ExportJob& job, ImageEncoder& encoder) {
  job.validate();
  if (!std::filesystem::is_directory(job.input)) throw IoError("not a directory: " + job.input.string());
  std::vector<std::string> names;
  for (const auto& entry : std::filesystem::directory_iterator(job.input))
    if (entry.is_regular_file()) names.push_back(entry.path().filename().string());
  std::sort(names.begin(), names.end());
  if (names.empty()) throw InsufficientDataError("image directory " + job.input.string() + " is empty");

  std::vector<Vec> rows;
  std::vector<std::string> ids, skipped;
  for (const auto& name : names) {
    try {
      Vec v = encoder.encode(job.input / name);
      if (v.size() != encoder.width()) throw ShapeError("encoder width mismatch on " + name);
      rows.push_back(std::move(v));
      ids.push_back(name);
    } catch (const DecodeError& e) {
      log(LogLevel::warn, "skipping " + name + ": " + e.what());
      skipped.push_back(name + "\t" + e.what());
    }
  }
  std::ofstream log_out(job.output.string() + ".skipped.txt", std::ios::trunc);
  for (const auto& s : skipped) log_out << s << '\n';
  if (rows.empty()) throw InsufficientDataError("no decodable images in " + job.input.string());
  Mat m(static_cast<Eigen::Index>(rows.size()), encoder.width());
  for (std::size_t i = 0; i < rows.size(); ++i) m.row(static_cast<Eigen::Index>(i)) = rows[i].transpose();
  return detail::finish_export(m, std::move(ids), job);
}

/// Lowercased name plus a naive plural.
inline std::vector<std::string> lexicon_forms(const std::string& category) {
  std::string base;
  for (char c : category) base.push_back(static_cast<char>(std::tolower(static_cast<unsigned char>(c))));
  auto ends = [&](std::string_view s) { return base.size() >= s.size() && base.ends_with(s); };
  std::string plural;
  if (ends("s") || ends("x") || ends("ch") || ends("sh"))
    plural = base + "es";
  else if (ends("y") && base.size() > 1 && std::string_view("aeiou").find(base[base.size() - 2]) == std::string_view::npos)
    plural = base.substr(0, base.size() - 1) + "ies";
  else
    plural = base + "s";
  return {base, plural};
}

struct CocoExport {
  long images = 0;
  long captions = 0;
  long lexicon_entries = 0;
};

/**
 * Reads a split-annotated caption file ({"images": [{"split", "sentences":
 * [{"raw"}]}], "categories": [{"name"}]}) and writes the split's captions one
 * per line plus the category lexicon. "train" also takes "restval" images.
 */
inline CocoExport export_coco_captions(const std::filesystem::path& annotations, const std::string& split,
                                       const std::filesystem::path& captions_out,
                                       const std::filesystem::path& lexicon_out) {
  std::ifstream in(annotations);
  if (!in) throw IoError("cannot open annotations " + annotations.string());
  CocoExport r;
  try {
    nlohmann::json j;
    in >> j;
    std::ofstream caps(captions_out, std::ios::trunc);
    if (!caps) throw IoError("cannot open " + captions_out.string() + " for writing");
    for (const auto& img : j.at("images")) {
      const auto s = img.at("split").get<std::string>();
      if (s != split && !(split == "train" && s == "restval")) continue;
      ++r.images;
      for (const auto& sentence : img.at("sentences")) {
        std::string raw = sentence.at("raw").get<std::string>();
        std::replace(raw.begin(), raw.end(), '\n', ' ');
        caps << raw << '\n';
        ++r.captions;
      }
    }
    std::set<std::string> lexicon;
    for (const auto& cat : j.at("categories"))
      for (auto& form : lexicon_forms(cat.at("name").get<std::string>())) lexicon.insert(std::move(form));
    std::ofstream lex(lexicon_out, std::ios::trunc);
    if (!lex) throw IoError("cannot open " + lexicon_out.string() + " for writing");
    for (const auto& w : lexicon) lex << w << '\n';
    r.lexicon_entries = static_cast<long>(lexicon.size());
  } catch (const nlohmann::json::exception& e) {
    throw FormatError("annotations " + annotations.string() + ": " + e.what());
  }
  return r;
}

}  // namespace gapbridge
