#pragma once

#include <filesystem>
#include <string>
#include <string_view>

#include "json.hpp"
#include "metacausal/types.hpp"

namespace metacausal {

using json = nlohmann::json;

// Serialise with every floating-point value written as %.17g so that files are
// byte-stable and round-trip exactly.
std::string dump_json(const json& j, int indent = -1);

json vector_to_json(const Vector& v);
Vector vector_from_json(const json& j);
// Row-major nested arrays.
json matrix_to_json(const Matrix& m);
Matrix matrix_from_json(const json& j);

std::string read_text_file(const std::filesystem::path& path);
void write_text_file(const std::filesystem::path& path, std::string_view contents);

// SHA-1 over "blob <len>\0<contents>", i.e. what `git hash-object` prints.
std::string git_blob_hash(std::string_view contents);
std::string sha1_hex(std::string_view contents);

}  // namespace metacausal
