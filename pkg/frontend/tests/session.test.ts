import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api";
import { SessionController } from "../src/session";
import type { ConceptLabel } from "../src/types";
import { twoFlaggedServer } from "./mock_server";

function controllerFor(server = twoFlaggedServer(), sessionId = "s1") {
  const api = new ApiClient(server.transport());
  return { server, api, controller: new SessionController(api, sessionId) };
}

function halfAndHalf(rows: number[]): Map<number, ConceptLabel> {
  const labels = new Map<number, ConceptLabel>();
  rows.forEach((row, i) => labels.set(row, i < rows.length / 2 ? "A" : "B"));
  return labels;
}

describe("phase flow", () => {
  it("starts in phase 1 on the highest-dissimilarity prototype", async () => {
    const { controller } = controllerFor();
    const screen = await controller.start();
    expect(screen.phase).toBe("judge");
    expect(screen.prototypeId).toBe(7);
    expect(screen.patches).toHaveLength(10);
    expect(screen.queueLength).toBe(2); // unflagged prototypes are not queued
  });

  it("a consistent verdict skips to the next prototype", async () => {
    const { controller } = controllerFor();
    await controller.start();
    const screen = await controller.judge("consistent");
    expect(screen.phase).toBe("judge");
    expect(screen.prototypeId).toBe(3);
  });

  it("an inconsistent verdict advances to labeling", async () => {
    const { controller } = controllerFor();
    await controller.start();
    const screen = await controller.judge("inconsistent");
    expect(screen.phase).toBe("label");
    expect(screen.prototypeId).toBe(7);
  });

  it("runs judge -> label -> wait -> assess -> next to completion", async () => {
    const { controller } = controllerFor();
    await controller.start();
    for (const proto of [7, 3]) {
      let screen = controller.screen();
      expect(screen.prototypeId).toBe(proto);
      await controller.judge("inconsistent");
      for (const [row, label] of halfAndHalf(controller.screen().patches.map((p) => p.patch_id))) {
        await controller.setLabel(row, label);
      }
      screen = await controller.submitAndSplit();
      expect(screen.phase).toBe("assess");
      expect(screen.result?.channel_a.patches.length).toBeGreaterThan(0);
      await controller.assess("more", "less");
    }
    expect(controller.screen().phase).toBe("done");
  });
});

describe("labeling gates (client-side mirror)", () => {
  it("blocks submission while any patch is unlabeled", async () => {
    const { controller } = controllerFor();
    await controller.start();
    await controller.judge("inconsistent");
    const rows = controller.screen().patches.map((p) => p.patch_id);
    for (const row of rows.slice(0, rows.length - 1)) {
      await controller.setLabel(row, "A");
    }
    const screen = await controller.submitAndSplit();
    expect(screen.phase).toBe("label"); // not submitted
    expect(screen.labelError).toMatch(/label every patch/);
    expect(screen.labelError).toContain("9/10");
  });

  it("mirrors the concept-size gate with an inline error", async () => {
    const { controller } = controllerFor();
    await controller.start();
    await controller.judge("inconsistent");
    const rows = controller.screen().patches.map((p) => p.patch_id);
    for (const row of rows.slice(0, rows.length - 1)) {
      await controller.setLabel(row, "A");
    }
    await controller.setLabel(rows[rows.length - 1]!, "B");
    const screen = await controller.submitAndSplit();
    expect(screen.phase).toBe("label");
    expect(screen.labelError).toContain("concept B below minimum size");
  });

  it("rejects labels for patches not on the screen", async () => {
    const { controller } = controllerFor();
    await controller.start();
    await controller.judge("inconsistent");
    await expect(controller.setLabel(99999, "A")).rejects.toThrow(/not on this screen/);
  });

  it("relabeling a patch replaces the earlier choice", async () => {
    const { controller } = controllerFor();
    await controller.start();
    await controller.judge("inconsistent");
    const rows = controller.screen().patches.map((p) => p.patch_id);
    await controller.setLabel(rows[0]!, "A");
    const screen = await controller.setLabel(rows[0]!, "B");
    expect(screen.labels.get(rows[0]!)).toBe("B");
  });
});

describe("effort accounting", () => {
  it("counts judgments + submitted labels + assessments", async () => {
    const { controller } = controllerFor();
    await controller.start();
    await controller.judge("inconsistent"); // 1
    for (const [row, label] of halfAndHalf(controller.screen().patches.map((p) => p.patch_id))) {
      await controller.setLabel(row, label);
    }
    await controller.submitAndSplit(); // +10
    await controller.assess("more", "more"); // +2
    await controller.judge("consistent"); // +1
    const effort = controller.effort();
    expect(effort.judgments).toBe(2);
    expect(effort.labelsSubmitted).toBe(10);
    expect(effort.assessments).toBe(2);
    expect(effort.decisions).toBe(14);
  });

  it("tracks elapsed time via the injected clock", async () => {
    const server = twoFlaggedServer();
    let nowMs = 1000;
    const api = new ApiClient(server.transport());
    const controller = new SessionController(api, "s1", 10, 2, () => nowMs);
    await controller.start();
    nowMs = 61_000;
    await controller.judge("consistent");
    expect(controller.effort().elapsedMs).toBe(60_000);
  });
});

describe("resume from the server log", () => {
  it("restores a mid-labeling screen with pending labels", async () => {
    const server = twoFlaggedServer();
    const first = controllerFor(server).controller;
    await first.start();
    await first.judge("inconsistent");
    const rows = first.screen().patches.map((p) => p.patch_id);
    await first.setLabel(rows[0]!, "A");
    await first.setLabel(rows[1]!, "B");

    // a reload: fresh controller, same session id, same server
    const second = controllerFor(server).controller;
    const screen = await second.resume();
    expect(screen.phase).toBe("label");
    expect(screen.prototypeId).toBe(7);
    expect(screen.labels.get(rows[0]!)).toBe("A");
    expect(screen.labels.get(rows[1]!)).toBe("B");
  });

  it("resumes past fully assessed prototypes", async () => {
    const server = twoFlaggedServer();
    const first = controllerFor(server).controller;
    await first.start();
    await first.judge("inconsistent");
    for (const [row, label] of halfAndHalf(first.screen().patches.map((p) => p.patch_id))) {
      await first.setLabel(row, label);
    }
    await first.submitAndSplit();
    await first.assess("more", "more");

    const second = controllerFor(server).controller;
    const screen = await second.resume();
    expect(screen.phase).toBe("judge");
    expect(screen.prototypeId).toBe(3);
  });

  it("resumes straight to assessment when the split already finished", async () => {
    const server = twoFlaggedServer();
    const first = controllerFor(server).controller;
    await first.start();
    await first.judge("inconsistent");
    for (const [row, label] of halfAndHalf(first.screen().patches.map((p) => p.patch_id))) {
      await first.setLabel(row, label);
    }
    await first.submitAndSplit(); // job done, no assessment yet

    const second = controllerFor(server).controller;
    const screen = await second.resume();
    expect(screen.phase).toBe("assess");
    expect(screen.result?.prototype_id).toBe(7);
  });

  it("an untouched session resumes at the start", async () => {
    const server = twoFlaggedServer();
    const { controller } = controllerFor(server, "fresh");
    const screen = await controller.resume();
    expect(screen.phase).toBe("judge");
    expect(screen.prototypeId).toBe(7);
  });
});
