#pragma once

#include <stdexcept>
#include <string>

namespace gpsmtm {

/// Base of every error raised by the library.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

#define GPSMTM_DEFINE_ERROR(Name)                                   \
    class Name : public Error {                                     \
    public:                                                         \
        explicit Name(const std::string& what) : Error(what) {}     \
    }

GPSMTM_DEFINE_ERROR(InvalidStop);
GPSMTM_DEFINE_ERROR(InvalidConfig);
GPSMTM_DEFINE_ERROR(NotSorted);
GPSMTM_DEFINE_ERROR(NoPois);
GPSMTM_DEFINE_ERROR(ValidationError);
GPSMTM_DEFINE_ERROR(TooShort);
GPSMTM_DEFINE_ERROR(VocabError);
GPSMTM_DEFINE_ERROR(StateError);
GPSMTM_DEFINE_ERROR(FormatError);
GPSMTM_DEFINE_ERROR(NoMaskedCells);
GPSMTM_DEFINE_ERROR(EmptyDataset);
GPSMTM_DEFINE_ERROR(NoSamples);
GPSMTM_DEFINE_ERROR(IoError);

#undef GPSMTM_DEFINE_ERROR

/// Malformed input record; carries the 1-based line number.
class ParseError : public Error {
public:
    ParseError(std::size_t line, const std::string& what)
        : Error("line " + std::to_string(line) + ": " + what), line_(line) {}
    std::size_t line() const noexcept { return line_; }

private:
    std::size_t line_;
};

/// Non-finite value in the network; layer is -1 for embeddings/heads.
class NumericalError : public Error {
public:
    NumericalError(int layer, const std::string& what)
        : Error(what + (layer >= 0 ? " (layer " + std::to_string(layer) + ")" : std::string{})),
          layer_(layer) {}
    int layer() const noexcept { return layer_; }

private:
    int layer_;
};

}  // namespace gpsmtm
