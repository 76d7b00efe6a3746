#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace phaseguard {

/// Base error type. `stage` names the pipeline stage that raised it and
/// `entity` the offending object (block id, symbol, file, ...).
class Error : public std::runtime_error {
public:
    Error(std::string stage, std::string entity, const std::string& what)
        : std::runtime_error(stage + ": " + what + (entity.empty() ? "" : " [" + entity + "]")),
          stage_(std::move(stage)), entity_(std::move(entity)) {}

    const std::string& stage() const noexcept { return stage_; }
    const std::string& entity() const noexcept { return entity_; }

private:
    std::string stage_;
    std::string entity_;
};

/// Malformed JSON. `offset` is the byte position reported by the parser.
class ParseError : public Error {
public:
    ParseError(const std::string& file, std::size_t offset, const std::string& what)
        : Error("parse", file + "@" + std::to_string(offset), what), file_(file), offset_(offset) {}

    const std::string& file() const noexcept { return file_; }
    std::size_t offset() const noexcept { return offset_; }

private:
    std::string file_;
    std::size_t offset_;
};

/// A PMIR invariant does not hold. `invariant` is a short stable tag.
class ValidationError : public Error {
public:
    ValidationError(std::string invariant, const std::string& entity, const std::string& what)
        : Error("validate", entity, invariant + ": " + what), invariant_(std::move(invariant)) {}

    const std::string& invariant() const noexcept { return invariant_; }

private:
    std::string invariant_;
};

}  // namespace phaseguard
