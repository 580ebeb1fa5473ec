import { describe, expect, it } from "vitest";

import { ApiClient } from "../src/api.js";
import { Editor, EditorState } from "../src/state.js";
import type { DraftStore } from "../src/state.js";
import { makeMockServer, makeRecord } from "./mockServer.js";

function makeEditor(violationRule?: Parameters<typeof makeMockServer>[1]) {
  const server = makeMockServer(
    [makeRecord("img_a"), makeRecord("img_b")],
    violationRule,
  );
  const api = new ApiClient("", server.fetch);
  return { server, api, editor: new Editor(api) };
}

class MemoryDrafts implements DraftStore {
  private m = new Map<string, string>();
  getItem(k: string) {
    return this.m.get(k) ?? null;
  }
  setItem(k: string, v: string) {
    this.m.set(k, v);
  }
  removeItem(k: string) {
    this.m.delete(k);
  }
}

describe("EditorState invariants", () => {
  it("disables submit while a validation is pending", () => {
    const st = new EditorState();
    expect(st.canSubmit()).toBe(false); // nothing loaded
    st.loadRecord(makeRecord("img_a"));
    expect(st.canSubmit()).toBe(true);
    st.pendingValidation = true;
    expect(st.canSubmit()).toBe(false);
    st.pendingValidation = false;
    expect(st.canSubmit()).toBe(true);
  });

  it("never advances the local version on edits", () => {
    const st = new EditorState();
    st.loadRecord(makeRecord("img_a"));
    st.moveJoint(3, 11, 22);
    st.setDepth(5, -4);
    st.setStatus("in_progress");
    expect(st.localVersion()).toBe(1);
    expect(st.serverVersion).toBe(1);
    expect(st.dirty).toBe(true);
  });

  it("keeps 2D coordinates untouched across depth edits", () => {
    const st = new EditorState();
    st.loadRecord(makeRecord("img_a"));
    const before = JSON.stringify(st.record!.keypoints_2d);
    for (let j = 1; j < 18; j++) st.setDepth(j, j * 3.5 - 20);
    expect(JSON.stringify(st.record!.keypoints_2d)).toBe(before);
  });

  it("cycles joint selection with wraparound", () => {
    const st = new EditorState();
    st.loadRecord(makeRecord("img_a"));
    st.selectJoint(17);
    st.cycleJoint(1);
    expect(st.selectedJoint).toBe(0);
    st.cycleJoint(-1);
    expect(st.selectedJoint).toBe(17);
  });
});

describe("save flow", () => {
  it("refetches after a save so local state is the stored record", async () => {
    const { server, editor } = makeEditor();
    await editor.open("img_a");
    editor.state.moveJoint(4, 123.25, 45.5);
    editor.state.setDepth(4, 7.5);
    const outcome = await editor.save();
    expect(outcome).toBe("saved");
    // roundtrip identity: local copy equals what the server now stores
    expect(editor.state.record).toEqual(server.store.get("img_a"));
    expect(editor.state.localVersion()).toBe(2);
    expect(editor.state.serverVersion).toBe(2);
    expect(editor.state.dirty).toBe(false);
  });

  it("surfaces a conflict and keeps local edits unchanged", async () => {
    const { server, editor } = makeEditor();
    await editor.open("img_a");
    editor.state.setDepth(6, 12);
    server.externalEdit("img_a", (r) => {
      r.depth_rel[6] = -99;
    });
    const outcome = await editor.save();
    expect(outcome).toBe("conflict");
    expect(editor.state.conflict).toEqual({
      currentVersion: 2,
      message: "version conflict, refetch before saving",
    });
    // no silent overwrite in either direction
    expect(server.store.get("img_a")!.depth_rel[6]).toBe(-99);
    expect(editor.state.record!.depth_rel[6]).toBe(12);
    expect(editor.state.localVersion()).toBe(1);
  });

  it("conflict discard adopts the server copy", async () => {
    const { server, editor } = makeEditor();
    await editor.open("img_a");
    editor.state.setDepth(6, 12);
    server.externalEdit("img_a", (r) => {
      r.depth_rel[6] = -99;
    });
    await editor.save();
    await editor.resolveConflictDiscard();
    expect(editor.state.record).toEqual(server.store.get("img_a"));
    expect(editor.state.conflict).toBeNull();
    expect(editor.state.dirty).toBe(false);
  });

  it("conflict retry merges local edits onto the current copy", async () => {
    const { server, editor } = makeEditor();
    await editor.open("img_a");
    editor.state.setDepth(6, 12);
    server.externalEdit("img_a", (r) => {
      r.depth_rel[7] = -99;
      r.status = "in_progress";
    });
    await editor.save();
    const outcome = await editor.resolveConflictRetry();
    expect(outcome).toBe("saved");
    const stored = server.store.get("img_a")!;
    expect(stored.depth_rel[6]).toBe(12); // mine
    expect(stored.depth_rel[7]).toBe(-99); // theirs, untouched locally
    expect(stored.status).toBe("in_progress"); // theirs
    expect(stored.version).toBe(3);
    expect(editor.state.localVersion()).toBe(3);
    expect(editor.state.conflict).toBeNull();
  });

  it("keeps field errors from a rejected save and does not bump", async () => {
    const { server, editor } = makeEditor();
    await editor.open("img_a");
    editor.state.record!.depth_rel[0] = 0.5; // pelvis must stay 0
    const outcome = await editor.save();
    expect(outcome).toBe("invalid");
    expect(editor.state.fieldErrors).toEqual([
      { field: "depth_rel[0]", message: "pelvis depth must be exactly 0" },
    ]);
    expect(server.store.get("img_a")!.version).toBe(1);
  });

  it("validateNow toggles pendingValidation around the round trip", async () => {
    const { editor } = makeEditor(() => [
      { bone: "r_knee:r_ankle", angle: 3, interval: [30, 180] },
    ]);
    await editor.open("img_a");
    const p = editor.validateNow();
    expect(editor.state.pendingValidation).toBe(true);
    expect(editor.state.canSubmit()).toBe(false);
    const res = await p;
    expect(editor.state.pendingValidation).toBe(false);
    expect(res!.angle_violations.map((v) => v.bone)).toEqual([
      "r_knee:r_ankle",
    ]);
  });
});

describe("drafts", () => {
  it("restores a same-version draft on open and clears it after save", async () => {
    const server = makeMockServer([makeRecord("img_a")]);
    const api = new ApiClient("", server.fetch);
    const drafts = new MemoryDrafts();

    const first = new Editor(api, drafts);
    await first.open("img_a");
    first.state.setDepth(9, 33);
    first.saveDraft();

    const second = new Editor(api, drafts);
    await second.open("img_a");
    expect(second.state.record!.depth_rel[9]).toBe(33);
    expect(second.state.dirty).toBe(true);
    await second.save();
    expect(drafts.getItem("napa-draft:img_a")).toBeNull();
  });

  it("ignores drafts forked from an older version", async () => {
    const server = makeMockServer([makeRecord("img_a")]);
    const api = new ApiClient("", server.fetch);
    const drafts = new MemoryDrafts();

    const first = new Editor(api, drafts);
    await first.open("img_a");
    first.state.setDepth(9, 33);
    first.saveDraft();

    server.externalEdit("img_a", (r) => {
      r.depth_rel[9] = 1;
    });
    const second = new Editor(api, drafts);
    await second.open("img_a");
    expect(second.state.record!.depth_rel[9]).toBe(1);
    expect(second.state.dirty).toBe(false);
  });
});
