// Copyright (C) 2026 The laserkv Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace laserkv {

enum class ErrorCode {
    InvalidArgument,
    OutOfRange,
    EmptyCandidates,
    MalformedWindow,
    MisalignedScores,
    ShapeMismatch,
    DuplicatePosition,
    PolicyViolation,
    Io,
    TraceCorrupt,
    ChecksumMismatch,
    UnsupportedVersion,
    InvalidConfig,
};

inline std::string_view to_string(ErrorCode code) {
    switch (code) {
    case ErrorCode::InvalidArgument: return "InvalidArgument";
    case ErrorCode::OutOfRange: return "OutOfRange";
    case ErrorCode::EmptyCandidates: return "EmptyCandidates";
    case ErrorCode::MalformedWindow: return "MalformedWindow";
    case ErrorCode::MisalignedScores: return "MisalignedScores";
    case ErrorCode::ShapeMismatch: return "ShapeMismatch";
    case ErrorCode::DuplicatePosition: return "DuplicatePosition";
    case ErrorCode::PolicyViolation: return "PolicyViolation";
    case ErrorCode::Io: return "Io";
    case ErrorCode::TraceCorrupt: return "TraceCorrupt";
    case ErrorCode::ChecksumMismatch: return "ChecksumMismatch";
    case ErrorCode::UnsupportedVersion: return "UnsupportedVersion";
    case ErrorCode::InvalidConfig: return "InvalidConfig";
    }
    return "Unknown";
}

/// Exception carrying a machine-readable code alongside the message.
class Error : public std::runtime_error {
public:
    Error(ErrorCode code, const std::string& message)
        : std::runtime_error(std::string(to_string(code)) + ": " + message),
          m_code(code) {}

    ErrorCode code() const noexcept {
        return m_code;
    }

private:
    ErrorCode m_code;
};

#define LASERKV_CHECK(cond, code, msg)                \
    do {                                              \
        if (!(cond)) {                                \
            throw ::laserkv::Error((code), (msg));    \
        }                                             \
    } while (false)

}  // namespace laserkv
