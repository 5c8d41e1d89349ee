// Copyright (C) 2026 The tokprune Authors
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <stdexcept>
#include <string>

namespace tokprune {

/// Base of every exception thrown by the library.
class error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
    /// Short machine-readable category, used as the CLI error prefix.
    virtual const char* kind() const noexcept { return "error"; }
};

/// Caller violated a documented precondition (bad arguments, shape mismatch).
class usage_error : public error {
public:
    using error::error;
    const char* kind() const noexcept override { return "usage-error"; }
};

/// Input data is unusable. Subclasses narrow the reason.
class data_error : public error {
public:
    using error::error;
    const char* kind() const noexcept override { return "data-error"; }
};

class format_error : public data_error {
public:
    using data_error::data_error;
    const char* kind() const noexcept override { return "format-error"; }
};

class corruption_error : public data_error {
public:
    using data_error::data_error;
    const char* kind() const noexcept override { return "corruption-error"; }
};

class validation_error : public data_error {
public:
    using data_error::data_error;
    const char* kind() const noexcept override { return "validation-error"; }
};

class io_error : public data_error {
public:
    using data_error::data_error;
    const char* kind() const noexcept override { return "io-error"; }
};

/// Requested budget lies outside what any schedule can achieve.
/// Carries the feasible interval in the budget's own unit.
class budget_error : public data_error {
public:
    budget_error(const std::string& what, double feasible_min, double feasible_max)
        : data_error(what), m_min(feasible_min), m_max(feasible_max) {}
    const char* kind() const noexcept override { return "budget-error"; }
    double feasible_min() const noexcept { return m_min; }
    double feasible_max() const noexcept { return m_max; }

private:
    double m_min;
    double m_max;
};

/// Broken internal invariant; indicates a bug rather than bad input.
class internal_error : public error {
public:
    using error::error;
    const char* kind() const noexcept override { return "internal-error"; }
};

}  // namespace tokprune
