import { spawn } from "node:child_process";
import { mkdtempSync, readFileSync } from "node:fs";
import * as os from "node:os";
import * as path from "node:path";
import { fileURLToPath } from "node:url";
import { describe, expect, it } from "vitest";

import { ClientContext, ForwardFn, Normal, serveLoop } from "../src/index.js";

const DRIVER = fileURLToPath(new URL("../tools/controller_driver.py", import.meta.url));

interface Report {
  address: string;
  mean: number;
  variance: number;
  ess: number;
  log_marginal: number;
  num_traces: number;
  divergent_count: number;
}

/** Latent Normal(0,1), one unit-variance observation at 1.0. */
const conjugate: ForwardFn = async (ctx: ClientContext) => {
  const x = await ctx.sample(new Normal(0.0, 1.0), "x");
  await ctx.observe(new Normal(x.item(), 1.0), 1.0, "obs");
  return x;
};

function runDriver(args: string[]): Promise<string> {
  return new Promise((resolve, reject) => {
    const child = spawn("python3", [DRIVER, ...args], {
      stdio: ["ignore", "pipe", "pipe"],
    });
    let out = "";
    let err = "";
    child.stdout.on("data", (d) => (out += d));
    child.stderr.on("data", (d) => (err += d));
    child.on("error", reject);
    child.on("close", (code) => {
      if (code === 0) resolve(out);
      else reject(new Error(`controller driver exited ${code}:\n${err}`));
    });
  });
}

describe("cross-language inference", () => {
  it(
    "recovers the conjugate posterior through the unmodified controller",
    async () => {
      const dir = mkdtempSync(path.join(os.tmpdir(), "sjinf-"));
      const sock = path.join(dir, "model.sock");
      const reportPath = path.join(dir, "report.json");
      let ready!: () => void;
      const listening = new Promise<void>((resolve) => {
        ready = resolve;
      });
      const done = serveLoop(`ipc://${sock}`, "conjugate-model", conjugate, {
        sessions: 1,
        onReady: () => ready(),
      });
      await listening;
      await Promise.all([
        runDriver([
          "--endpoint",
          `ipc://${sock}`,
          "--num-traces",
          "10000",
          "--seed",
          "11",
          "--out",
          reportPath,
        ]),
        done,
      ]);
      const report: Report = JSON.parse(readFileSync(reportPath, "utf8"));
      expect(report.address).toBe("[x]__Normal");
      expect(report.num_traces).toBe(10000);
      expect(report.divergent_count).toBe(0);
      expect(Math.abs(report.mean - 0.5)).toBeLessThanOrEqual(0.05);
      expect(Math.abs(report.variance - 0.5)).toBeLessThanOrEqual(0.05);
      expect(report.ess).toBeGreaterThanOrEqual(100);
    },
    120_000,
  );

  it(
    "produces a trace log byte-identical to the Python client's",
    async () => {
      const dir = mkdtempSync(path.join(os.tmpdir(), "sjlog-"));
      const sock = path.join(dir, "model.sock");
      const tsLog = path.join(dir, "ts.sjtl");
      const refLog = path.join(dir, "ref.sjtl");
      const tsReportPath = path.join(dir, "ts-report.json");

      let ready!: () => void;
      const listening = new Promise<void>((resolve) => {
        ready = resolve;
      });
      const done = serveLoop(`ipc://${sock}`, "conjugate-model", conjugate, {
        sessions: 1,
        onReady: () => ready(),
      });
      await listening;
      await Promise.all([
        runDriver([
          "--endpoint",
          `ipc://${sock}`,
          "--num-traces",
          "50",
          "--seed",
          "42",
          "--log",
          tsLog,
          "--out",
          tsReportPath,
        ]),
        done,
      ]);
      const refOut = await runDriver([
        "--reference-log",
        refLog,
        "--num-traces",
        "50",
        "--seed",
        "42",
      ]);

      const tsBytes = readFileSync(tsLog);
      const refBytes = readFileSync(refLog);
      expect(tsBytes.length).toBeGreaterThan(0);
      expect(tsBytes.equals(refBytes)).toBe(true);

      // Same draws, same floats: the posterior reports agree exactly too.
      const tsReport: Report = JSON.parse(readFileSync(tsReportPath, "utf8"));
      const refReport: Report = JSON.parse(refOut);
      expect(tsReport).toEqual(refReport);
    },
    60_000,
  );
});
