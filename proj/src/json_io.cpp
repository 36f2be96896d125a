#include "metacausal/json_io.hpp"

#include <openssl/evp.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

namespace metacausal {

namespace {

void dump_impl(const json& j, int indent, int depth, std::string& out) {
  const auto newline = [&](int d) {
    if (indent < 0) return;
    out.push_back('\n');
    out.append(static_cast<std::size_t>(indent * d), ' ');
  };
  switch (j.type()) {
    case json::value_t::object: {
      if (j.empty()) {
        out += "{}";
        return;
      }
      out.push_back('{');
      bool first = true;
      for (auto it = j.begin(); it != j.end(); ++it) {
        if (!first) out.push_back(',');
        first = false;
        newline(depth + 1);
        out += json(it.key()).dump();
        out += indent < 0 ? ":" : ": ";
        dump_impl(it.value(), indent, depth + 1, out);
      }
      newline(depth);
      out.push_back('}');
      return;
    }
    case json::value_t::array: {
      if (j.empty()) {
        out += "[]";
        return;
      }
      // Numeric arrays stay on one line even when pretty-printing.
      const bool flat = std::all_of(j.begin(), j.end(), [](const json& e) { return e.is_primitive(); });
      out.push_back('[');
      bool first = true;
      for (const auto& e : j) {
        if (!first) out += (flat && indent >= 0) ? ", " : ",";
        first = false;
        if (!flat) newline(depth + 1);
        dump_impl(e, indent, depth + 1, out);
      }
      if (!flat) newline(depth);
      out.push_back(']');
      return;
    }
    case json::value_t::number_float: {
      const double v = j.get<double>();
      if (!std::isfinite(v)) {
        out += "null";
        return;
      }
      char buf[40];
      std::snprintf(buf, sizeof buf, "%.17g", v);
      out += buf;
      // Keep floats recognisable as floats on re-parse.
      if (std::string_view(buf).find_first_of(".eEn") == std::string_view::npos) out += ".0";
      return;
    }
    default:
      out += j.dump();
  }
}

}  // namespace

std::string dump_json(const json& j, int indent) {
  std::string out;
  dump_impl(j, indent, 0, out);
  return out;
}

json vector_to_json(const Vector& v) {
  json a = json::array();
  for (Eigen::Index i = 0; i < v.size(); ++i) a.push_back(v[i]);
  return a;
}

Vector vector_from_json(const json& j) {
  if (!j.is_array()) throw ConfigError("expected a numeric array");
  Vector v(static_cast<Eigen::Index>(j.size()));
  for (std::size_t i = 0; i < j.size(); ++i) {
    if (!j[i].is_number()) throw ConfigError("expected a numeric array");
    v[static_cast<Eigen::Index>(i)] = j[i].get<double>();
  }
  return v;
}

json matrix_to_json(const Matrix& m) {
  json a = json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) a.push_back(vector_to_json(m.row(r).transpose()));
  return a;
}

Matrix matrix_from_json(const json& j) {
  if (!j.is_array()) throw ConfigError("expected an array of rows");
  if (j.empty()) return Matrix(0, 0);
  const auto cols = static_cast<Eigen::Index>(j[0].size());
  Matrix m(static_cast<Eigen::Index>(j.size()), cols);
  for (std::size_t r = 0; r < j.size(); ++r) {
    const Vector row = vector_from_json(j[r]);
    if (row.size() != cols) throw ConfigError("ragged matrix rows");
    m.row(static_cast<Eigen::Index>(r)) = row.transpose();
  }
  return m;
}

std::string read_text_file(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open " + path.string());
  std::ostringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text_file(const std::filesystem::path& path, std::string_view contents) {
  if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path.string());
  out.write(contents.data(), static_cast<std::streamsize>(contents.size()));
}

std::string sha1_hex(std::string_view contents) {
  unsigned char digest[EVP_MAX_MD_SIZE];
  unsigned int len = 0;
  EVP_Digest(contents.data(), contents.size(), digest, &len, EVP_sha1(), nullptr);
  static constexpr char kHex[] = "0123456789abcdef";
  std::string hex;
  for (unsigned int i = 0; i < len; ++i) {
    hex.push_back(kHex[digest[i] >> 4]);
    hex.push_back(kHex[digest[i] & 0xF]);
  }
  return hex;
}

std::string git_blob_hash(std::string_view contents) {
  std::string framed = "blob " + std::to_string(contents.size());
  framed.push_back('\0');
  framed.append(contents);
  return sha1_hex(framed);
}

}  // namespace metacausal
